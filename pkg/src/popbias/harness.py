"""Experiment configuration, paired seeded runs, sweeps and result files.

Every seed builds one world and runs the evaluated ranker next to the quality
ranker on its own copy, feeding both the same user stream and the same
choice uniforms. Regret is the prefix sum of the difference in exact
expected instantaneous value.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .analysis import estimate_rho_min_environment
from .environment import (
    GeneratorConfig,
    SelectionHistory,
    env_step,
    expected_instantaneous_value,
    make_synthetic_instance,
)
from .errors import ConfigError
from .rankers import RANKER_NAMES, QualityRanker, make_ranker

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("seed", "t", "user", "slate", "choice", "value_policy", "value_reference", "regret_cum")
FORMATS = ("csv", "jsonl")
FINAL_WINDOW = 100

# Literal constants of the algorithm; slow and heavily over-exploring at desk scale.
THEORY_PROFILE: dict[str, Any] = {
    "lam": None,
    "bonus_scale": 1.0,
    "tau_scale": 1.0,
    "refit_every": 1,
    "refit_growth": 1.0,
}
# Scaled constants used for the regret experiments.
PRACTICAL_PROFILE: dict[str, Any] = {
    "lam": 200.0,
    "bonus_scale": 1e-5,
    "tau_scale": 0.02,
    "refit_every": 8,
    "refit_growth": 1.5,
}
PROFILES = {"theory": THEORY_PROFILE, "practical": PRACTICAL_PROFILE}

QP_FAMILY = ("qp", "greedy", "oblivious")
SWEEP_PARAMS = ("M", "d", "alpha_min", "b_max")


def _reject_unknown(section: str, doc: dict, allowed) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {unknown}")


@dataclass
class InstanceConfig:
    n_items: int = 10
    slate_size: int = 3
    d_q: int = 8
    d_p: int = 8
    alpha_min: float = 0.02
    b_max: float = 0.2
    n_users: int = 32
    rank_bias: list[float] | None = None
    utility_mode: str = "quality"
    c: float = 0.0
    slate_dependent_caps: bool = False
    L_q: float = 1.0
    L_p: float = 1.0

    def generator_config(self) -> GeneratorConfig:
        if self.utility_mode not in ("quality", "combined"):
            raise ConfigError("utility_mode must be 'quality' or 'combined'")
        if self.utility_mode == "quality" and self.c:
            raise ConfigError("utility coefficient c needs utility_mode='combined'")
        cfg = GeneratorConfig(
            n_items=self.n_items,
            slate_size=self.slate_size,
            d_q=self.d_q,
            d_p=self.d_p,
            alpha_min=self.alpha_min,
            b_max=self.b_max,
            n_users=self.n_users,
            rank_bias=None if self.rank_bias is None else list(self.rank_bias),
            utility_c=self.c if self.utility_mode == "combined" else 0.0,
            slate_dependent_caps=self.slate_dependent_caps,
            L_q=self.L_q,
            L_p=self.L_p,
        )
        cfg.validate()
        return cfg


@dataclass
class RankerConfig:
    name: str = "qp"
    profile: str = "practical"
    lam: float | None = None
    delta: float = 0.05
    rho_min: float | str = 0.5
    bonus_scale: float | None = None
    tau_scale: float | None = None
    refit_every: int | None = None
    refit_growth: float | None = None
    budget: int = 1_000_000

    def validate(self) -> None:
        if self.name not in RANKER_NAMES:
            raise ConfigError(f"unknown ranker {self.name!r}; expected one of {RANKER_NAMES}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; expected one of {tuple(PROFILES)}")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if isinstance(self.rho_min, str):
            if self.rho_min != "estimate":
                raise ConfigError("rho_min must be a number in (0, 1) or 'estimate'")
        elif not 0 < self.rho_min < 1:
            raise ConfigError("rho_min must lie in (0, 1)")
        if self.budget < 1:
            raise ConfigError("enumeration budget must be positive")

    def resolved(self) -> dict[str, Any]:
        """Profile values overridden by any explicitly set field."""
        params = dict(PROFILES[self.profile])
        for key in ("lam", "bonus_scale", "tau_scale", "refit_every", "refit_growth"):
            value = getattr(self, key)
            if value is not None:
                params[key] = value
        params.update(delta=self.delta, budget=self.budget)
        return params


@dataclass
class ExperimentConfig:
    instance: InstanceConfig = field(default_factory=InstanceConfig)
    ranker: RankerConfig = field(default_factory=RankerConfig)
    horizon: int = 10_000
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    out: str = "results"
    format: str = "csv"
    trace: bool = False
    workers: int = 1

    def validate(self) -> None:
        self.instance.generator_config()
        self.ranker.validate()
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seed list has duplicates")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")
        if self.workers < 1:
            raise ConfigError("workers must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        top = {f.name for f in fields(cls)}
        _reject_unknown("config", doc, top)
        inst = doc.get("instance", {})
        rank = doc.get("ranker", {})
        _reject_unknown("instance", inst, {f.name for f in fields(InstanceConfig)})
        _reject_unknown("ranker", rank, {f.name for f in fields(RankerConfig)})
        rest = {k: v for k, v in doc.items() if k not in ("instance", "ranker")}
        try:
            cfg = cls(instance=InstanceConfig(**inst), ranker=RankerConfig(**rank), **rest)
            cfg.seeds = [int(s) for s in cfg.seeds]
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        out = copy.deepcopy(self)
        for key, value in changes.items():
            setattr(out, key, value)
        return out


@dataclass
class RunRecord:
    """Per-step log of one seed, plus end-of-run summaries."""

    seed: int
    users: np.ndarray
    reference_users: np.ndarray
    slates: list
    choices: np.ndarray
    value_policy: np.ndarray
    value_reference: np.ndarray
    counts: np.ndarray
    presented: np.ndarray
    estimator_failures: list[int] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.users)

    @property
    def increments(self) -> np.ndarray:
        return self.value_reference - self.value_policy

    @property
    def regret_cum(self) -> np.ndarray:
        return np.cumsum(self.increments)

    @property
    def final_regret(self) -> float:
        return float(self.regret_cum[-1])

    def window_mean(self, start: int, stop: int) -> float:
        return float(np.mean(self.increments[start:stop]))

    def final_window(self, width: int = FINAL_WINDOW) -> float:
        return self.window_mean(max(0, self.horizon - width), self.horizon)

    def rows(self):
        regret = self.regret_cum
        for k in range(self.horizon):
            yield (
                self.seed,
                k + 1,
                int(self.users[k]),
                ";".join(str(i) for i in self.slates[k]),
                int(self.choices[k]),
                float(self.value_policy[k]),
                float(self.value_reference[k]),
                float(regret[k]),
            )


def _rho_min(config: ExperimentConfig, env) -> float:
    if config.ranker.rho_min != "estimate":
        return float(config.ranker.rho_min)
    res = estimate_rho_min_environment(env)
    if not res.feasible:
        raise ConfigError("rho_min estimate is infeasible for this instance; set rho_min explicitly")
    return min(max(res.rho, res.tol), 1 - res.tol)


def run_seed(config: ExperimentConfig, seed: int) -> RunRecord:
    """One paired run: evaluated ranker and quality reference on twin worlds."""
    env = make_synthetic_instance(config.instance.generator_config(), np.random.default_rng([seed, 0]))
    name = config.ranker.name
    meta: dict[str, Any] = {"ranker": name, "profile": config.ranker.profile}
    if name in QP_FAMILY:
        params = config.ranker.resolved()
        params["rho_min"] = _rho_min(config, env)
        params["trace"] = config.trace
        params["psi_star"] = env.psi_star
        meta["ranker_params"] = {k: v for k, v in params.items() if k != "psi_star"}
    else:
        params = {"budget": config.ranker.budget}
    policy = make_ranker(name, env, np.random.default_rng([seed, 1]), **params)
    reference = QualityRanker(env, config.ranker.budget)

    users_rng = np.random.default_rng([seed, 2])
    policy_rng = np.random.default_rng([seed, 3])
    reference_rng = np.random.default_rng([seed, 3])
    h_pol = SelectionHistory.empty(env.n_items)
    h_ref = SelectionHistory.empty(env.n_items)

    T = config.horizon
    users = np.empty(T, dtype=np.int64)
    ref_users = np.empty(T, dtype=np.int64)
    choices = np.empty(T, dtype=np.int64)
    v_pol = np.empty(T)
    v_ref = np.empty(T)
    slates = []
    failures = []
    errors = getattr(policy, "errors", 0)
    for k in range(T):
        user = int(users_rng.integers(env.n_users))
        slate = policy.select(user, h_pol)
        ref_slate = reference.select(user, h_ref)
        v_pol[k] = expected_instantaneous_value(env, h_pol, user, slate)
        v_ref[k] = expected_instantaneous_value(env, h_ref, user, ref_slate)
        choice, _ = env_step(env, h_pol, slate, policy_rng, user=user)
        env_step(env, h_ref, ref_slate, reference_rng, user=user)
        policy.observe(user, slate, choice, h_pol)
        users[k] = user
        ref_users[k] = h_ref.log[-1][0]
        choices[k] = choice
        slates.append(slate)
        now = getattr(policy, "errors", 0)
        if now != errors:
            failures.append(k + 1)
            errors = now
    trace = list(getattr(policy, "trace", None) or [])
    return RunRecord(
        seed=seed,
        users=users,
        reference_users=ref_users,
        slates=slates,
        choices=choices,
        value_policy=v_pol,
        value_reference=v_ref,
        counts=h_pol.counts.copy(),
        presented=h_pol.presented.copy(),
        estimator_failures=failures,
        trace=trace,
        metadata=meta,
    )


def _run_seed_args(args):
    return run_seed(*args)


def run_experiment(config: ExperimentConfig) -> list[RunRecord]:
    """Run every seed; output order follows ``config.seeds``."""
    config.validate()
    jobs = [(config, s) for s in config.seeds]
    if config.workers == 1 or len(jobs) == 1:
        return [run_seed(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(_run_seed_args, jobs))


# -- sweeps ---------------------------------------------------------------------


@dataclass
class SweepRow:
    value: float
    final_window: float
    early_window: float
    final_regret: float
    per_seed_final_window: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def _with_param(config: ExperimentConfig, param: str, value) -> ExperimentConfig:
    out = config.replace()
    inst = out.instance
    if param == "M":
        inst.slate_size = int(value)
        inst.rank_bias = None
    elif param == "d":
        inst.d_q = inst.d_p = int(value)
    elif param == "alpha_min":
        inst.alpha_min = float(value)
    elif param == "b_max":
        inst.b_max = float(value)
    else:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}")
    out.validate()
    return out


def sweep(config: ExperimentConfig, param: str, values: Sequence, window: int = FINAL_WINDOW) -> list[SweepRow]:
    """Mean regret per step over the final ``window`` steps, averaged over seeds, per value."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    table = []
    for value in values:
        records = run_experiment(_with_param(config, param, value))
        finals = [r.final_window(window) for r in records]
        table.append(
            SweepRow(
                value=float(value),
                final_window=float(np.mean(finals)),
                early_window=float(np.mean([r.window_mean(0, window) for r in records])),
                final_regret=float(np.mean([r.final_regret for r in records])),
                per_seed_final_window=finals,
            )
        )
    return table


# -- output ---------------------------------------------------------------------


def summarize(records: Sequence[RunRecord]) -> dict:
    """Mean final regret and first/last 10% regret increments across seeds."""
    if not records:
        raise ValueError("no records to summarize")
    T = records[0].horizon
    w = max(1, T // 10)
    first = [r.window_mean(0, w) for r in records]
    last = [r.window_mean(T - w, T) for r in records]
    return {
        "seeds": [r.seed for r in records],
        "horizon": T,
        "mean_final_regret": float(np.mean([r.final_regret for r in records])),
        "first_window_increment": float(np.mean(first)),
        "last_window_increment": float(np.mean(last)),
        "final_100_window": float(np.mean([r.final_window() for r in records])),
        "estimator_failures": int(sum(len(r.estimator_failures) for r in records)),
    }


def item_summary(records: Sequence[RunRecord]) -> list[dict]:
    """Selections and presentations per item, averaged over seeds."""
    counts = np.mean([r.counts for r in records], axis=0)
    shown = np.mean([r.presented for r in records], axis=0)
    return [{"item": i, "selections": float(c), "presentations": float(p)} for i, (c, p) in enumerate(zip(counts, shown))]


def emit_results(records: Sequence[RunRecord], out_dir, fmt: str = "csv", metadata: dict | None = None) -> list[Path]:
    """Write per-step rows, the per-item summary, metadata and any estimator trace."""
    if not records:
        raise ValueError("no records to emit")
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    runs = out / f"runs.{fmt}"
    with runs.open("w", newline="") as fh:
        if fmt == "csv":
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for rec in records:
                for row in rec.rows():
                    writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        else:
            for rec in records:
                for row in rec.rows():
                    fh.write(json.dumps(dict(zip(CSV_COLUMNS, row))) + "\n")
    written.append(runs)

    items = out / "items.csv"
    with items.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("item", "selections", "presentations"), lineterminator="\n")
        writer.writeheader()
        writer.writerows(item_summary(records))
    written.append(items)

    traces = [dict(seed=r.seed, **row) for r in records for row in r.trace]
    if traces:
        path = out / "trace.jsonl"
        path.write_text("".join(json.dumps(row) + "\n" for row in traces))
        written.append(path)

    meta = {"summary": summarize(records), "runs": [{"seed": r.seed, **r.metadata} for r in records]}
    if metadata:
        meta.update(metadata)
    path = out / "metadata.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default))
    written.append(path)
    return written


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def read_runs_csv(path) -> list[dict]:
    """Parse a runs CSV back into typed rows."""
    rows = []
    with Path(path).open(newline="") as fh:
        for raw in csv.DictReader(fh):
            rows.append(
                {
                    "seed": int(raw["seed"]),
                    "t": int(raw["t"]),
                    "user": int(raw["user"]),
                    "slate": tuple(int(i) for i in raw["slate"].split(";")),
                    "choice": int(raw["choice"]),
                    "value_policy": float(raw["value_policy"]),
                    "value_reference": float(raw["value_reference"]),
                    "regret_cum": float(raw["regret_cum"]),
                }
            )
    return rows
