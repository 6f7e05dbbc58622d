"""Ground-truth world: embeddings, hidden parameters and popularity dynamics.

Slate embeddings concatenate per-item embeddings position by position:
``x(u, s) = [xq(u, I_1), ..., xq(u, I_M), xp(u, I_1), ..., xp(u, I_M)]``.
Item ids are 0-based throughout.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .choice import softmax_choice, sample_choice
from .errors import ConfigError
from .slates import Slate, validate_slate

NO_CLICK = 0


@dataclass(frozen=True)
class PopularityDynamics:
    """Selection-count popularity: bias = min(alpha0[I] * n(I), cap)."""

    alpha0: np.ndarray
    b_max: float

    def __post_init__(self):
        if np.any(np.asarray(self.alpha0) <= 0):
            raise ConfigError("popularity increments alpha0 must be positive")
        if not (0 < self.b_max < math.inf):
            raise ConfigError("b_max must be positive and finite")

    @property
    def alpha_min(self) -> float:
        return float(np.min(self.alpha0))


@dataclass(frozen=True)
class EnvironmentInstance:
    quality_emb: np.ndarray  # (U, N, dq)
    popularity_emb: np.ndarray  # (U, N, dp)
    theta_star: np.ndarray  # (M, M*dq)
    phi_star: np.ndarray  # (M, M*dp)
    rank_bias: np.ndarray  # (M,)
    dynamics: PopularityDynamics
    utility_c: float = 0.0
    L_q: float = 1.0
    L_p: float = 1.0
    metadata: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return self.quality_emb.shape[0]

    @property
    def n_items(self) -> int:
        return self.quality_emb.shape[1]

    @property
    def slate_size(self) -> int:
        return self.rank_bias.shape[0]

    @property
    def d_q(self) -> int:
        return self.quality_emb.shape[2]

    @property
    def d_p(self) -> int:
        return self.popularity_emb.shape[2]

    @property
    def feature_dim(self) -> int:
        return self.slate_size * (self.d_q + self.d_p)

    @property
    def psi_star(self) -> np.ndarray:
        """Stacked true parameters, row i = (theta*_i, phi*_i)."""
        return np.hstack((self.theta_star, self.phi_star))

    def _slates(self, slates) -> np.ndarray:
        return np.atleast_2d(np.asarray(slates, dtype=np.int64))

    def quality_features(self, user: int, slates) -> np.ndarray:
        s = self._slates(slates)
        return self.quality_emb[user, s].reshape(len(s), -1)

    def popularity_features(self, user: int, slates) -> np.ndarray:
        s = self._slates(slates)
        return self.popularity_emb[user, s].reshape(len(s), -1)

    def features(self, user: int, slates) -> np.ndarray:
        """x(u, s) for one slate or an (S, M) batch; returns (S, feature_dim)."""
        return np.hstack((self.quality_features(user, slates), self.popularity_features(user, slates)))

    def quality(self, user: int, slates) -> np.ndarray:
        """Quality bias per position, shape (S, M)."""
        return self.quality_features(user, slates) @ self.theta_star.T

    def caps(self, user: int, slates) -> np.ndarray:
        """Saturated popularity caps b_i(u, s), shape (S, M)."""
        return self.popularity_features(user, slates) @ self.phi_star.T

    def utility(self, quality: np.ndarray, popularity: np.ndarray) -> np.ndarray:
        return quality + self.utility_c * popularity if self.utility_c else quality

    def check_slate(self, slate: Sequence[int]) -> Slate:
        return validate_slate(slate, self.n_items, self.slate_size)

    def check_invariants(self, atol: float = 1e-12) -> None:
        """Raise ConfigError if parameter norms or bias ranges are violated."""
        if np.any(np.linalg.norm(self.theta_star, axis=1) > self.L_q + atol):
            raise ConfigError("quality parameter norm exceeds L_q")
        if np.any(np.linalg.norm(self.phi_star, axis=1) > self.L_p + atol):
            raise ConfigError("popularity parameter norm exceeds L_p")
        if np.any(np.abs(self.rank_bias) > 1 + atol):
            raise ConfigError("rank bias outside [-1, 1]")
        q_lo, q_hi = _bilinear_range(self.quality_emb, self.theta_star)
        b_lo, b_hi = _bilinear_range(self.popularity_emb, self.phi_star)
        if q_lo < -1 - atol or q_hi > 1 + atol:
            raise ConfigError(f"quality bias range [{q_lo:.3g}, {q_hi:.3g}] outside [-1, 1]")
        if b_lo < -atol or b_hi > 1 + atol:
            raise ConfigError(f"popularity cap range [{b_lo:.3g}, {b_hi:.3g}] outside [0, 1]")
        if b_hi > self.dynamics.b_max + atol:
            raise ConfigError("popularity caps exceed b_max")

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {
            "format": "popbias-instance/1",
            "n_users": self.n_users,
            "n_items": self.n_items,
            "slate_size": self.slate_size,
            "d_q": self.d_q,
            "d_p": self.d_p,
            "quality_emb": self.quality_emb.tolist(),
            "popularity_emb": self.popularity_emb.tolist(),
            "theta_star": self.theta_star.tolist(),
            "phi_star": self.phi_star.tolist(),
            "rank_bias": self.rank_bias.tolist(),
            "alpha0": self.dynamics.alpha0.tolist(),
            "b_max": self.dynamics.b_max,
            "utility_c": self.utility_c,
            "L_q": self.L_q,
            "L_p": self.L_p,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "EnvironmentInstance":
        arr = lambda key: np.asarray(doc[key], dtype=float)  # noqa: E731
        env = cls(
            quality_emb=arr("quality_emb").reshape(doc["n_users"], doc["n_items"], doc["d_q"]),
            popularity_emb=arr("popularity_emb").reshape(doc["n_users"], doc["n_items"], doc["d_p"]),
            theta_star=arr("theta_star").reshape(doc["slate_size"], -1),
            phi_star=arr("phi_star").reshape(doc["slate_size"], -1),
            rank_bias=arr("rank_bias"),
            dynamics=PopularityDynamics(alpha0=arr("alpha0"), b_max=float(doc["b_max"])),
            utility_c=float(doc.get("utility_c", 0.0)),
            L_q=float(doc.get("L_q", 1.0)),
            L_p=float(doc.get("L_p", 1.0)),
            metadata=dict(doc.get("metadata", {})),
        )
        return env

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "EnvironmentInstance":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _bilinear_range(emb: np.ndarray, params: np.ndarray) -> tuple[float, float]:
    """Bounds on x(u, s)^T w_i over all slates, allowing repeated items.

    Exact for block-structured parameters (one nonzero block per position).
    """
    n_users, n_items, dim = emb.shape
    m = params.shape[0]
    blocks = params.reshape(m, m, dim)  # (position i, slot j, dim)
    vals = np.einsum("uno,ijo->uijn", emb, blocks)  # contribution of item n in slot j
    lo = vals.min(axis=-1).sum(axis=-1)
    hi = vals.max(axis=-1).sum(axis=-1)
    return float(lo.min()), float(hi.max())


@dataclass
class SelectionHistory:
    """Selection counts n_t(I), presentation counts and the raw interaction log."""

    counts: np.ndarray
    presented: np.ndarray
    log: list = field(default_factory=list)
    no_clicks: int = 0

    @classmethod
    def empty(cls, n_items: int) -> "SelectionHistory":
        return cls(counts=np.zeros(n_items, dtype=np.int64), presented=np.zeros(n_items, dtype=np.int64))

    @property
    def t(self) -> int:
        """Index of the next step (1-based)."""
        return len(self.log) + 1

    def record(self, user: int, slate: Slate, choice: int) -> None:
        self.log.append((int(user), tuple(slate), int(choice)))
        self.presented[list(slate)] += 1
        if choice == NO_CLICK:
            self.no_clicks += 1
        else:
            self.counts[slate[choice - 1]] += 1

    def counts_before_last(self) -> np.ndarray:
        """n_t as it stood before the most recent step was recorded."""
        counts = self.counts.copy()
        if self.log:
            _, slate, choice = self.log[-1]
            if choice != NO_CLICK:
                counts[slate[choice - 1]] -= 1
        return counts

    def copy(self) -> "SelectionHistory":
        return SelectionHistory(self.counts.copy(), self.presented.copy(), list(self.log), self.no_clicks)


def _biases(env: EnvironmentInstance, history: SelectionHistory, user: int, slate: Slate):
    """(quality, popularity) per position for an already validated slate."""
    idx = np.asarray(slate, dtype=np.int64)
    q = env.quality_emb[user, idx].reshape(-1) @ env.theta_star.T
    cap = env.popularity_emb[user, idx].reshape(-1) @ env.phi_star.T
    grown = env.dynamics.alpha0[idx] * history.counts[idx]
    return q, np.minimum(grown, cap)


def popularity_bias_value(env: EnvironmentInstance, history: SelectionHistory, user: int, slate) -> np.ndarray:
    """Transient popularity bias min(alpha0(I_i) n_t(I_i), b_i(u, s)) per position."""
    return _biases(env, history, user, env.check_slate(slate))[1]


def dispositions(env: EnvironmentInstance, history: SelectionHistory, user: int, slate) -> tuple[np.ndarray, np.ndarray]:
    """Return (disposition, popularity) for the current popularity state."""
    q, pop = _biases(env, history, user, env.check_slate(slate))
    return q + pop + env.rank_bias, pop


def sample_user(env: EnvironmentInstance, rng: np.random.Generator) -> int:
    return int(rng.integers(env.n_users))


def env_step(
    env: EnvironmentInstance,
    history: SelectionHistory,
    slate,
    rng: np.random.Generator,
    user: int | None = None,
) -> tuple[int, SelectionHistory]:
    """Advance the world by one interaction; updates ``history`` in place.

    When ``user`` is None it is drawn uniformly from the population with ``rng``.
    """
    slate = env.check_slate(slate)
    if user is None:
        user = sample_user(env, rng)
    q, pop = _biases(env, history, user, slate)
    choice = sample_choice(softmax_choice(q + pop + env.rank_bias), rng)
    history.record(user, slate, choice)
    return choice, history


def expected_instantaneous_value(env: EnvironmentInstance, history: SelectionHistory, user: int, slate) -> float:
    """Exact expected utility sum_i mu_i z_i(delta) under the current state."""
    q, pop = _biases(env, history, user, env.check_slate(slate))
    z = softmax_choice(q + pop + env.rank_bias).item_probs
    return float(np.dot(env.utility(q, pop), z))


# -- synthetic generator ---------------------------------------------------


def default_rank_bias(slate_size: int) -> list[float]:
    """Linearly decaying attention: 0, -1/M, -2/M, ..."""
    return [-i / slate_size for i in range(slate_size)]


@dataclass
class GeneratorConfig:
    n_items: int = 10
    slate_size: int = 3
    d_q: int = 8
    d_p: int = 8
    alpha_min: float = 0.02
    b_max: float = 0.2
    n_users: int = 32
    rank_bias: list[float] | None = None
    utility_c: float = 0.0
    slate_dependent_caps: bool = False
    L_q: float = 1.0
    L_p: float = 1.0

    def validate(self) -> None:
        if self.n_items < 2:
            raise ConfigError("corpus needs at least two items")
        if not 1 <= self.slate_size <= self.n_items:
            raise ConfigError("slate size must lie in [1, n_items]")
        if min(self.d_q, self.d_p, self.n_users) < 1:
            raise ConfigError("dimensions and user count must be positive")
        if self.alpha_min <= 0:
            raise ConfigError("alpha_min must be positive")
        if not 0 < self.b_max <= 1:
            raise ConfigError("b_max must lie in (0, 1] so caps stay inside [0, 1]")
        if self.utility_c < 0:
            raise ConfigError("utility coefficient c must be non-negative")
        if self.L_q < 1 or self.L_p < 1:
            # uniform draws on [0, 1/sqrt(d)]^d reach unit norm
            raise ConfigError("L_q and L_p must be at least 1 for the uniform generator")
        kappa = self.resolved_rank_bias()
        if len(kappa) != self.slate_size:
            raise ConfigError("rank_bias length must equal slate_size")
        if any(abs(k) > 1 for k in kappa):
            raise ConfigError("rank bias entries must lie in [-1, 1]")

    def resolved_rank_bias(self) -> list[float]:
        return list(self.rank_bias) if self.rank_bias is not None else default_rank_bias(self.slate_size)


def _block_params(vec: np.ndarray, slate_size: int) -> np.ndarray:
    """Position i reads only the embedding of the item in slot i."""
    return np.kron(np.eye(slate_size), vec[None, :])


def make_synthetic_instance(config: GeneratorConfig, rng: np.random.Generator) -> EnvironmentInstance:
    """Uniform parameters and embeddings on [0, 1/sqrt(d)]^d, caps rescaled to b_max."""
    config.validate()
    M, N, U = config.slate_size, config.n_items, config.n_users
    hq, hp = 1 / math.sqrt(config.d_q), 1 / math.sqrt(config.d_p)

    theta = rng.uniform(0.0, hq, size=config.d_q)
    quality_emb = rng.uniform(0.0, hq, size=(U, N, config.d_q))
    popularity_emb = rng.uniform(0.0, hp, size=(U, N, config.d_p))
    if config.slate_dependent_caps:
        hs = 1 / math.sqrt(M * config.d_p)
        phi_star = rng.uniform(0.0, hs, size=(M, M * config.d_p))
    else:
        phi_star = _block_params(rng.uniform(0.0, hp, size=config.d_p), M)
    theta_star = _block_params(theta, M)

    _, raw_max = _bilinear_range(popularity_emb, phi_star)
    if raw_max > 0:
        phi_star = phi_star * (config.b_max / raw_max)

    env = EnvironmentInstance(
        quality_emb=quality_emb,
        popularity_emb=popularity_emb,
        theta_star=theta_star,
        phi_star=phi_star,
        rank_bias=np.asarray(config.resolved_rank_bias(), dtype=float),
        dynamics=PopularityDynamics(alpha0=np.full(N, config.alpha_min), b_max=config.b_max),
        utility_c=config.utility_c,
        L_q=config.L_q,
        L_p=config.L_p,
        metadata={"generator": "uniform", "slate_dependent_caps": config.slate_dependent_caps},
    )
    env.check_invariants()
    return env
