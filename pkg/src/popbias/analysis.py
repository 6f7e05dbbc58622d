"""Analytical constructions made executable.

* the variability parameter rho_min of a quality/popularity correlation block,
* a pair of environments that no observer can tell apart after saturation,
* the two-item popularity-driven random walk and its lock-in behaviour.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .choice import softmax_choice
from .environment import (
    EnvironmentInstance,
    PopularityDynamics,
    SelectionHistory,
    env_step,
)
from .rankers import PopularityDrivenRanker
from .slates import enumerate_slates

EIG_TOL = 1e-10


# -- rho_min ------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationBlock:
    """User-averaged second moments of the quality and popularity embeddings."""

    sigma_qq: np.ndarray
    sigma_qp: np.ndarray
    sigma_pp: np.ndarray

    def __post_init__(self):
        qq, qp, pp = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (self.sigma_qq, self.sigma_qp, self.sigma_pp))
        if qq.shape[0] != qq.shape[1] or pp.shape[0] != pp.shape[1]:
            raise ValueError("diagonal blocks must be square")
        if qp.shape != (qq.shape[0], pp.shape[0]):
            raise ValueError(f"cross block has shape {qp.shape}, expected {(qq.shape[0], pp.shape[0])}")
        object.__setattr__(self, "sigma_qq", qq)
        object.__setattr__(self, "sigma_qp", qp)
        object.__setattr__(self, "sigma_pp", pp)

    @classmethod
    def from_features(cls, xq: np.ndarray, xp: np.ndarray) -> "CorrelationBlock":
        """Average of outer products over the rows (users) of ``xq`` and ``xp``."""
        xq, xp = np.atleast_2d(xq), np.atleast_2d(xp)
        n = len(xq)
        return cls(xq.T @ xq / n, xq.T @ xp / n, xp.T @ xp / n)

    @classmethod
    def from_environment(cls, env: EnvironmentInstance, slate) -> "CorrelationBlock":
        users = range(env.n_users)
        xq = np.vstack([env.quality_features(u, slate) for u in users])
        xp = np.vstack([env.popularity_features(u, slate) for u in users])
        return cls.from_features(xq, xp)

    @classmethod
    def from_matrix(cls, full: np.ndarray, d_q: int) -> "CorrelationBlock":
        full = np.asarray(full, dtype=float)
        return cls(full[:d_q, :d_q], full[:d_q, d_q:], full[d_q:, d_q:])

    def assemble(self, rho: float = 1.0) -> np.ndarray:
        top = np.hstack((rho * self.sigma_qq, self.sigma_qp))
        bottom = np.hstack((self.sigma_qp.T, self.sigma_pp))
        return np.vstack((top, bottom))

    def min_eigenvalue(self, rho: float) -> float:
        return float(np.linalg.eigvalsh(self.assemble(rho))[0])


@dataclass(frozen=True)
class RhoMinResult:
    rho: float | None  # None when no rho < 1 works
    feasible: bool
    tol: float

    def to_dict(self) -> dict:
        return {"rho_min": self.rho, "feasible": self.feasible, "tol": self.tol}


def _psd(block: CorrelationBlock, rho: float, eig_tol: float) -> bool:
    return block.min_eigenvalue(rho) >= -eig_tol


def estimate_rho_min(block: CorrelationBlock, tol: float = 1e-6, eig_tol: float = EIG_TOL) -> RhoMinResult:
    """Smallest rho in (0, 1) keeping the rho-scaled block PSD, by bisection.

    Feasibility is monotone in rho because raising rho adds a PSD term.
    Returns ``rho=tol`` when already feasible at ``tol`` and an infeasible
    result when the block fails at ``1 - tol``.
    """
    if not 0 < tol < 0.5:
        raise ValueError("tol must lie in (0, 0.5)")
    if not _psd(block, 1.0, eig_tol):
        raise ValueError("correlation block is not PSD at rho = 1")
    if _psd(block, tol, eig_tol):
        return RhoMinResult(tol, True, tol)
    if not _psd(block, 1.0 - tol, eig_tol):
        return RhoMinResult(None, False, tol)
    lo, hi = tol, 1.0 - tol
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _psd(block, mid, eig_tol):
            hi = mid
        else:
            lo = mid
    return RhoMinResult(hi, True, tol)


def rho_min_grid(block: CorrelationBlock, step: float = 1e-4, eig_tol: float = EIG_TOL) -> float | None:
    """Brute-force reference: first grid point in (0, 1) with a PSD block."""
    for rho in np.arange(step, 1.0, step):
        if _psd(block, float(rho), eig_tol):
            return float(rho)
    return None


def estimate_rho_min_environment(
    env: EnvironmentInstance, slates=None, tol: float = 1e-6, eig_tol: float = EIG_TOL
) -> RhoMinResult:
    """Largest per-slate rho_min, the smallest rho valid for every slate."""
    if slates is None:
        slates = enumerate_slates(env.n_items, env.slate_size)
    worst = 0.0
    for slate in slates:
        res = estimate_rho_min(CorrelationBlock.from_environment(env, slate), tol, eig_tol)
        if not res.feasible:
            return res
        worst = max(worst, res.rho)
    return RhoMinResult(worst, True, tol)


# -- nonidentifiable pair -------------------------------------------------------

# The construction uses dispositions up to 2; both factors are halved to stay in
# the [-1, 1] / [0, 1] ranges and a rank bias of 1/2 restores the disposition 1.
PAIR_SCALE = 0.5
PAIR_RANK_BIAS = 0.5


def build_nonidentifiable_pair(
    epsilon: float, alpha_min: float = 0.02
) -> tuple[EnvironmentInstance, EnvironmentInstance]:
    """Two single-position, two-item worlds with equal saturated dispositions.

    Unscaled, world 1 has qualities (eps, -eps) and caps (1 - eps, 1 + eps);
    world 2 flips the quality sign and swaps the caps. Saturated dispositions
    are 1 for both items in both worlds.
    """
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    if alpha_min <= 0:
        raise ValueError("alpha_min must be positive")
    s = PAIR_SCALE
    xq = np.array([[[1.0], [-1.0]]])  # (user, item, dim)
    caps = s * np.array([1 - epsilon, 1 + epsilon])
    b_max = s * (1 + epsilon)

    def world(sign: float, cap_order) -> EnvironmentInstance:
        return EnvironmentInstance(
            quality_emb=xq.copy(),
            popularity_emb=caps[list(cap_order)].reshape(1, 2, 1),
            theta_star=np.array([[sign * s * epsilon]]),
            phi_star=np.array([[1.0]]),
            rank_bias=np.array([PAIR_RANK_BIAS]),
            dynamics=PopularityDynamics(alpha0=np.full(2, alpha_min), b_max=b_max),
            metadata={
                "construction": "nonidentifiable-pair",
                "epsilon": epsilon,
                "scale": s,
                "rank_bias_compensation": PAIR_RANK_BIAS,
                "problem": 1 if sign > 0 else 2,
            },
        )

    pair = world(1.0, (0, 1)), world(-1.0, (1, 0))
    for env in pair:
        env.check_invariants()
    return pair


def saturated_dispositions(env: EnvironmentInstance, user: int = 0) -> np.ndarray:
    """Disposition of every slate once all caps are reached, shape (S, M)."""
    slates = enumerate_slates(env.n_items, env.slate_size)
    return env.quality(user, slates) + env.caps(user, slates) + env.rank_bias


@dataclass
class NonidentifiabilityReport:
    epsilon: float
    exact_probs: list  # per world, selection probability of each single-item slate
    empirical_rates: list  # per world, per item
    expected_rate: float
    steps: int

    def max_exact_gap(self) -> float:
        a, b = (np.asarray(p) for p in self.exact_probs)
        return float(np.max(np.abs(a - b)))

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "exact_probs": self.exact_probs,
            "empirical_rates": self.empirical_rates,
            "expected_rate": self.expected_rate,
            "max_exact_gap": self.max_exact_gap(),
            "steps": self.steps,
        }


def nonidentifiability_demo(
    epsilon: float = 0.1, alpha_min: float = 0.02, steps: int = 100_000, seed: int = 0
) -> NonidentifiabilityReport:
    """Saturate both worlds, then compare exact and empirical selection rates.

    Each single-item slate is shown until its item is saturated, then for
    ``steps`` further steps.
    """
    pair = build_nonidentifiable_pair(epsilon, alpha_min)
    rng = np.random.default_rng(seed)
    exact, empirical = [], []
    for env in pair:
        probs, rates = [], []
        for item in range(env.n_items):
            slate = (item,)
            history = SelectionHistory.empty(env.n_items)
            cap = env.caps(0, slate)[0, 0]
            while env.dynamics.alpha0[item] * history.counts[item] < cap:
                env_step(env, history, slate, rng, user=0)
            disp = saturated_dispositions(env)[item]
            probs.append(float(softmax_choice(disp).item_probs[0]))
            clicks = 0
            for _ in range(steps):
                choice, _ = env_step(env, history, slate, rng, user=0)
                clicks += choice == 1
            rates.append(clicks / steps)
        exact.append(probs)
        empirical.append(rates)
    return NonidentifiabilityReport(epsilon, exact, empirical, math.e / (1 + math.e), steps)


# -- two-item random walk -------------------------------------------------------


@dataclass(frozen=True)
class TwoItemWalkConfig:
    """Selection probabilities of the two slate positions under rank bias only."""

    p: float
    q: float

    def __post_init__(self):
        if not (0 < self.q < 1 and 0 < self.p < 1):
            raise ValueError("p and q must lie in (0, 1)")
        if self.p + self.q > 1 + 1e-15:
            raise ValueError("p + q must not exceed 1")
        if self.p < self.q:
            raise ValueError("position 1 must be at least as likely as position 2")

    @classmethod
    def from_rank_bias(cls, kappa: Sequence[float]) -> "TwoItemWalkConfig":
        dist = softmax_choice(np.asarray(kappa, dtype=float))
        if dist.slate_size != 2:
            raise ValueError("the walk needs exactly two positions")
        return cls(float(dist.item_probs[0]), float(dist.item_probs[1]))

    @property
    def rerank_bound(self) -> float:
        """Upper bound p / (p - q^2) on the expected number of reranks."""
        return self.p / (self.p - self.q**2)


@dataclass
class WalkResult:
    pi1: float
    pi2: float
    mean_reranks: float
    se_reranks: float
    reranks: list[int]
    late_rerank_free: float  # share of seeds with no rerank in the final half
    horizon: int

    def to_dict(self) -> dict:
        return {
            "pi1": self.pi1,
            "pi2": self.pi2,
            "mean_reranks": self.mean_reranks,
            "se_reranks": self.se_reranks,
            "late_rerank_free": self.late_rerank_free,
            "horizon": self.horizon,
            "reranks": self.reranks,
        }


def simulate_two_item_walk(walk: TwoItemWalkConfig, horizon: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """One run of the count-sorted two-item ranker.

    Returns (position-1 selections, position-2 selections, reranks, step of
    the last rerank or -1). Equal counts keep the current order.
    """
    order = [int(i) for i in rng.permutation(2)]
    counts = [0, 0]
    u = rng.random(horizon)
    p, pq = walk.p, walk.p + walk.q
    first = second = reranks = 0
    last = -1
    for t in range(horizon):
        top, other = order
        if counts[other] > counts[top]:
            order = [other, top]
            top, other = other, top
            reranks += 1
            last = t
        x = u[t]
        if x < p:
            counts[top] += 1
            first += 1
        elif x < pq:
            counts[other] += 1
            second += 1
    return first, second, reranks, last


def rank_size_empirical(walk: TwoItemWalkConfig, horizon: int, seeds: Sequence[int]) -> WalkResult:
    """Per-position selection shares and rerank counts averaged over seeds."""
    seeds = list(seeds)
    if not seeds or horizon < 1:
        raise ValueError("need at least one seed and a positive horizon")
    firsts, seconds, reranks, late_free = [], [], [], 0
    for seed in seeds:
        f, s, r, last = simulate_two_item_walk(walk, horizon, np.random.default_rng(seed))
        firsts.append(f / horizon)
        seconds.append(s / horizon)
        reranks.append(r)
        late_free += last < horizon // 2
    r = np.asarray(reranks, dtype=float)
    se = float(r.std(ddof=1) / math.sqrt(len(r))) if len(r) > 1 else 0.0
    return WalkResult(
        pi1=float(np.mean(firsts)),
        pi2=float(np.mean(seconds)),
        mean_reranks=float(r.mean()),
        se_reranks=se,
        reranks=[int(x) for x in reranks],
        late_rerank_free=late_free / len(seeds),
        horizon=horizon,
    )


# -- lock-in under rank bias only ---------------------------------------------


def rank_bias_only_instance(n_items: int, rank_bias: Sequence[float], alpha_min: float = 0.02) -> EnvironmentInstance:
    """Single-user world where choices depend on position alone."""
    M = len(rank_bias)
    return EnvironmentInstance(
        quality_emb=np.zeros((1, n_items, 1)),
        popularity_emb=np.zeros((1, n_items, 1)),
        theta_star=np.zeros((M, M)),
        phi_star=np.zeros((M, M)),
        rank_bias=np.asarray(rank_bias, dtype=float),
        dynamics=PopularityDynamics(alpha0=np.full(n_items, alpha_min), b_max=1.0),
        metadata={"construction": "rank-bias-only"},
    )


@dataclass
class LockInResult:
    top_items: list[int]
    top_quality_rank: list[int]  # 0 = best quality label
    lucky: float
    unlucky: float
    frozen: float  # share of seeds whose ranking stopped changing in the final half
    final_counts: list[list[int]] = field(default_factory=list)

    @property
    def distinct_top_items(self) -> int:
        return len(set(self.top_items))

    def to_dict(self) -> dict:
        return {
            "top_items": self.top_items,
            "top_quality_rank": self.top_quality_rank,
            "lucky": self.lucky,
            "unlucky": self.unlucky,
            "frozen": self.frozen,
            "distinct_top_items": self.distinct_top_items,
        }


def lock_in_experiment(
    n_items: int = 10,
    horizon: int = 5000,
    seeds: Sequence[int] = range(100),
    rank_bias: Sequence[float] | None = None,
) -> LockInResult:
    """Popularity-driven ranking when users only react to position.

    Items carry quality labels (item k has quality rank k) that never enter
    the choice. A seed is lucky when the final top item sits in the better
    half of the labels and unlucky otherwise.
    """
    kappa = np.linspace(1.0, -1.0, n_items) if rank_bias is None else np.asarray(rank_bias, dtype=float)
    env = rank_bias_only_instance(n_items, kappa)
    M = env.slate_size
    tops, finals, frozen = [], [], 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        ranker = PopularityDrivenRanker(n_items, M, rng)
        history = SelectionHistory.empty(n_items)
        last_change = -1
        for t in range(horizon):
            before = ranker.reranks
            slate = ranker.select(0, history)
            if ranker.reranks != before:
                last_change = t
            env_step(env, history, slate, rng, user=0)
        tops.append(int(slate[0]))
        finals.append(history.counts.tolist())
        frozen += last_change < horizon // 2
    n = len(tops)
    half = n_items / 2
    lucky = sum(top < half for top in tops) / n
    return LockInResult(
        top_items=tops,
        top_quality_rank=list(tops),
        lucky=lucky,
        unlucky=1 - lucky,
        frozen=frozen / n,
        final_counts=finals,
    )
