"""Projected regularized MNL estimator, optimistic bonus and the QP ranker.

Parameters are held as a matrix ``psi`` of shape (M, D): row i stacks the
quality and popularity parameters of position i, so position i's logit is
``x(u, s) @ psi[i] + kappa[i]``. ``stack_params``/``split_params`` convert
to the (theta_1..theta_M, phi_1..phi_M) vector layout.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

import numpy as np

from .choice import choice_probs
from .errors import EstimatorError
from .slates import Slate, enumerate_slates, first_argmax

logger = logging.getLogger(__name__)


def stack_params(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """(M, Dq) and (M, Dp) blocks -> flat vector (theta_1..theta_M, phi_1..phi_M)."""
    return np.concatenate((np.ravel(theta), np.ravel(phi)))


def split_params(vec: np.ndarray, slate_size: int, d_quality: int) -> np.ndarray:
    """Inverse of ``stack_params``; returns the (M, D) row layout."""
    vec = np.asarray(vec, dtype=float)
    nq = slate_size * d_quality
    theta = vec[:nq].reshape(slate_size, d_quality)
    phi = vec[nq:].reshape(slate_size, -1)
    return np.hstack((theta, phi))


# -- closed-form constants --------------------------------------------------


def tau_min(slate_size: int, b_max: float, alpha_min: float, corpus_size: int, delta: float) -> float:
    """Selection-count threshold (8 M b_max / alpha_min) log(|D| / delta)."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if min(slate_size, b_max, alpha_min, corpus_size) <= 0:
        raise ValueError("tau_min arguments must be positive")
    return 8 * slate_size * b_max / alpha_min * math.log(corpus_size / delta)


def gamma_t(t: float, delta: float, slate_size: int, dim: int, norm_bound: float, lam: float) -> float:
    """Confidence width 4 e^4 M^2 (sqrt(lam M) L + 2 sqrt(log(1/delta) + M d log(1 + t/(lam d))))."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    M, d = slate_size, dim
    inner = math.log(1 / delta) + M * d * math.log1p(t / (lam * d))
    return 4 * math.e**4 * M**2 * (math.sqrt(lam * M) * norm_bound + 2 * math.sqrt(inner))


def bonus_coefficient(slate_size: int, rho_min: float) -> float:
    if not 0 < rho_min < 1:
        raise ValueError("rho_min must lie in (0, 1)")
    return 4 * math.sqrt(slate_size) + 1 / math.sqrt(1 - rho_min)


def exploration_bonus(
    slate: Slate,
    V: np.ndarray,
    t: float,
    *,
    delta: float,
    rho_min: float,
    lam: float,
    norm_bound: float,
    features: Callable[[int, Slate], np.ndarray],
    users: Sequence[int],
    scale: float = 1.0,
) -> float:
    """Optimistic bonus with the expectation averaged exactly over ``users``."""
    X = np.vstack([np.ravel(features(u, slate)) for u in users])
    W = np.linalg.inv(V)
    mean_sq = float(np.mean(np.einsum("ud,de,ue->u", X, W, X)))
    M = len(slate)
    g = gamma_t(t, delta, M, X.shape[1], norm_bound, lam)
    return scale * bonus_coefficient(M, rho_min) * g * math.sqrt(mean_sq)


# -- filtered history -------------------------------------------------------


class FilteredHistory:
    """Records admitted by the saturation gate, aggregated by (user, slate).

    Aggregation keeps the likelihood exact: identical contexts contribute
    count-weighted terms.
    """

    def __init__(self, slate_size: int, feature_dim: int, tau_min: float = 0.0):
        self.slate_size = slate_size
        self.feature_dim = feature_dim
        self.tau_min = tau_min
        self.records: list[tuple[int, int, Slate, int]] = []
        self._rows: dict = {}
        self._X = np.empty((64, feature_dim))
        self._C = np.zeros((64, slate_size + 1))
        self._k = 0

    @classmethod
    def from_arrays(cls, X: np.ndarray, choices: Sequence[int], slate_size: int) -> "FilteredHistory":
        """Build from per-record features; each row is its own context."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        fh = cls(slate_size, X.shape[1])
        for k, (x, c) in enumerate(zip(X, choices)):
            fh.admit(k, (k,), int(c), x, key=("row", k))
        return fh

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_contexts(self) -> int:
        return self._k

    @property
    def X(self) -> np.ndarray:
        return self._X[: self._k]

    @property
    def C(self) -> np.ndarray:
        """Choice counts per context; column 0 counts no-clicks."""
        return self._C[: self._k]

    @property
    def weights(self) -> np.ndarray:
        return self.C.sum(axis=1)

    def admit(self, user: int, slate: Slate, choice: int, x: np.ndarray, t: int = -1, key=None) -> None:
        key = (user, tuple(slate)) if key is None else key
        row = self._rows.get(key)
        if row is None:
            if self._k == len(self._X):
                self._X = np.vstack((self._X, np.empty_like(self._X)))
                self._C = np.vstack((self._C, np.zeros_like(self._C)))
            row = self._rows[key] = self._k
            self._X[row] = x
            self._k += 1
        self._C[row, choice] += 1
        self.records.append((t, user, tuple(slate), choice))


def _probs(psi, history, kappa):
    logits = history.X @ psi.T
    if kappa is not None:
        logits = logits + kappa
    return logits, choice_probs(logits)


def log_likelihood(psi: np.ndarray, history: FilteredHistory, lam: float, kappa=None) -> float:
    """Regularized multinomial log-likelihood; no-clicks contribute log z_0."""
    psi = np.asarray(psi, dtype=float)
    reg = 0.5 * lam * float(np.sum(psi**2))
    if history.n_contexts == 0:
        return -reg
    logits, _ = _probs(psi, history, kappa)
    full = np.hstack((np.zeros((len(logits), 1)), logits))
    shift = full.max(axis=1, keepdims=True)
    log_z = full - (shift + np.log(np.exp(full - shift).sum(axis=1, keepdims=True)))
    return float(np.sum(history.C * log_z)) - reg


def log_likelihood_gradient(psi: np.ndarray, history: FilteredHistory, lam: float, kappa=None) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    if history.n_contexts == 0:
        return -lam * psi
    _, P = _probs(psi, history, kappa)
    resid = history.C[:, 1:] - history.weights[:, None] * P[:, 1:]
    return resid.T @ history.X - lam * psi


def _fisher_product(P: np.ndarray, history: FilteredHistory, v: np.ndarray) -> np.ndarray:
    """sum_k n_k (diag z_k - z_k z_k^T)(v x_k) x_k^T, the negative log-lik Hessian applied to v."""
    z = P[:, 1:]
    a = history.X @ v.T
    s = z * a - z * np.sum(z * a, axis=1, keepdims=True)
    return (history.weights[:, None] * s).T @ history.X


def _conjugate_gradient(apply, b, tol, maxiter):
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(np.sum(r * r))
    for _ in range(maxiter):
        if math.sqrt(rr) <= tol:
            break
        Ap = apply(p)
        alpha = rr / float(np.sum(p * Ap))
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(np.sum(r * r))
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def fit_mle(
    history: FilteredHistory,
    lam: float,
    kappa=None,
    psi0: np.ndarray | None = None,
    grad_tol: float = 1e-8,
    max_iter: int = 10_000,
    shape: tuple[int, int] | None = None,
) -> np.ndarray:
    """Maximize the regularized likelihood by damped Newton-CG with backtracking."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if psi0 is None:
        shape = shape or (history.slate_size, history.feature_dim)
        psi = np.zeros(shape)
    else:
        psi = np.array(psi0, dtype=float)
    if history.n_contexts == 0:
        return np.zeros_like(psi)

    ll = log_likelihood(psi, history, lam, kappa)
    gn = math.inf
    for _ in range(max_iter):
        _, P = _probs(psi, history, kappa)
        grad = (history.C[:, 1:] - history.weights[:, None] * P[:, 1:]).T @ history.X - lam * psi
        gn = float(np.linalg.norm(grad))
        if gn <= grad_tol:
            return psi

        def neg_hess(v, P=P):
            return _fisher_product(P, history, v) + lam * v

        step_dir = _conjugate_gradient(neg_hess, grad, tol=min(0.5, math.sqrt(gn)) * gn, maxiter=10 * psi.size)
        slope = float(np.sum(grad * step_dir))
        step = 1.0
        while True:
            cand = psi + step * step_dir
            ll_new = log_likelihood(cand, history, lam, kappa)
            if ll_new >= ll + 1e-4 * step * slope:
                break
            # improvement below float resolution of the objective: judge by the gradient instead
            if step * slope < 1e-13 * max(1.0, abs(ll)):
                g_new = log_likelihood_gradient(cand, history, lam, kappa)
                if np.linalg.norm(g_new) < gn:
                    break
            step *= 0.5
            if step < 1e-12:
                raise EstimatorError("MLE line search failed", gn)
        psi, ll = cand, ll_new
    raise EstimatorError("MLE did not converge", gn)


def g_map(psi: np.ndarray, history: FilteredHistory, kappa=None) -> np.ndarray:
    """psi + sum_k z(delta_k) (x) x_k."""
    psi = np.asarray(psi, dtype=float)
    if history.n_contexts == 0:
        return psi.copy()
    _, P = _probs(psi, history, kappa)
    return psi + (history.weights[:, None] * P[:, 1:]).T @ history.X


def project_to_balls(psi: np.ndarray, d_quality: int, L_q: float, L_p: float) -> np.ndarray:
    """Per-row Euclidean projection onto ||theta_i|| <= L_q, ||phi_i|| <= L_p."""
    out = np.array(psi, dtype=float)
    for sl, bound in ((slice(None, d_quality), L_q), (slice(d_quality, None), L_p)):
        block = out[:, sl]
        if block.shape[1] == 0:
            continue
        norms = np.linalg.norm(block, axis=1, keepdims=True)
        out[:, sl] = block * np.minimum(1.0, bound / np.maximum(norms, 1e-300))
    return out


def is_feasible(psi: np.ndarray, d_quality: int, L_q: float, L_p: float, atol: float = 1e-12) -> bool:
    ok_q = np.all(np.linalg.norm(psi[:, :d_quality], axis=1) <= L_q + atol)
    ok_p = psi.shape[1] == d_quality or np.all(np.linalg.norm(psi[:, d_quality:], axis=1) <= L_p + atol)
    return bool(ok_q and ok_p)


def projection_objective(psi, target, history, W, kappa=None) -> float:
    r = g_map(psi, history, kappa) - target
    return 0.5 * float(np.sum((r @ W) * r))


def g_jacobian(psi: np.ndarray, history: FilteredHistory, kappa=None) -> np.ndarray:
    """Dense Jacobian of the g-map in row-major (M*D) layout; symmetric PD."""
    M, D = psi.shape
    J = np.eye(M * D)
    if history.n_contexts == 0:
        return J
    _, P = _probs(psi, history, kappa)
    z, X, n = P[:, 1:], history.X, history.weights
    for i in range(M):
        for j in range(i, M):
            w = n * ((z[:, i] if i == j else 0.0) - z[:, i] * z[:, j])
            block = X.T @ (X * w[:, None])
            J[i * D:(i + 1) * D, j * D:(j + 1) * D] += block
            if j != i:
                J[j * D:(j + 1) * D, i * D:(i + 1) * D] += block.T
    return J


def _ball_qp(H, c, blocks, bounds, tol=1e-12, max_iter=200):
    """min 1/2 y'Hy - c'y subject to ||y[b]|| <= L_b, via Newton ascent on the dual."""
    nb = len(blocks)
    mu = np.zeros(nb)
    def solve(mu):
        K = H.copy()
        for b, idx in enumerate(blocks):
            K[idx, idx] += mu[b]
        chol = np.linalg.cholesky(K)
        y = np.linalg.solve(chol.T, np.linalg.solve(chol, c))
        dual = -0.5 * float(c @ y) - 0.5 * float(np.sum(mu * bounds**2))
        return chol, y, dual

    chol, y, dual = solve(mu)
    for _ in range(max_iter):
        sq = np.array([float(y[idx] @ y[idx]) for idx in blocks])
        grad = 0.5 * (sq - bounds**2)
        free = (mu > 0) | (grad > 0)
        if not free.any() or np.max(np.abs(grad[free])) <= tol * max(1.0, float(np.max(bounds**2))):
            break
        Y = np.zeros((len(c), nb))
        for b, idx in enumerate(blocks):
            Y[idx, b] = y[idx]
        KY = np.linalg.solve(chol.T, np.linalg.solve(chol, Y))
        curv = (Y.T @ KY)[np.ix_(free, free)]
        step = np.zeros(nb)
        step[free] = np.linalg.solve(curv + 1e-300 * np.eye(free.sum()), grad[free])
        a = 1.0
        while a > 1e-16:
            mu_new = np.maximum(mu + a * step, 0.0)
            chol_n, y_n, dual_n = solve(mu_new)
            if dual_n >= dual - 1e-15 * max(1.0, abs(dual)):
                break
            a *= 0.5
        if np.array_equal(mu_new, mu):
            break
        mu, chol, y, dual = mu_new, chol_n, y_n, dual_n
    return y


def project_mle(
    psi_ml: np.ndarray,
    history: FilteredHistory,
    V: np.ndarray,
    d_quality: int,
    L_q: float,
    L_p: float,
    kappa=None,
    tol: float = 1e-9,
    max_iter: int = 10_000,
) -> np.ndarray:
    """argmin over the norm balls of ||g(psi) - g(psi_ml)||^2 in the (I_M kron V^-1) norm.

    Gauss-Newton on the g-map residual. Each linearized subproblem is a
    ball-constrained quadratic solved exactly through its dual; iterates stay
    feasible because steps are convex combinations of feasible points.
    """
    psi_ml = np.asarray(psi_ml, dtype=float)
    if is_feasible(psi_ml, d_quality, L_q, L_p):
        return psi_ml.copy()
    M, D = psi_ml.shape
    W = np.linalg.inv(V)
    W = 0.5 * (W + W.T)
    G = np.kron(np.eye(M), W)
    target = g_map(psi_ml, history, kappa)

    blocks, bounds = [], []
    for i in range(M):
        blocks.append(np.arange(i * D, i * D + d_quality))
        bounds.append(L_q)
        if D > d_quality:
            blocks.append(np.arange(i * D + d_quality, (i + 1) * D))
            bounds.append(L_p)
    bounds = np.asarray(bounds, dtype=float)

    def objective(psi):
        r = (g_map(psi, history, kappa) - target).ravel()
        return r, 0.5 * float(r @ G @ r)

    psi = project_to_balls(psi_ml, d_quality, L_q, L_p)
    r, val = objective(psi)
    step_norm = math.inf
    for _ in range(max_iter):
        J = g_jacobian(psi, history, kappa)
        JG = J @ G
        H = JG @ J
        H = 0.5 * (H + H.T)
        b = JG @ r
        x = psi.ravel()
        y = _ball_qp(H, H @ x - b, blocks, bounds)
        y = project_to_balls(y.reshape(M, D), d_quality, L_q, L_p).ravel()
        d = y - x
        step_norm = float(np.linalg.norm(d))
        if step_norm <= tol * max(1.0, float(np.linalg.norm(x))):
            return psi
        slope = float(b @ d)
        a = 1.0
        while True:
            cand = (x + a * d).reshape(M, D)
            r_c, val_c = objective(cand)
            if val_c <= val + 1e-4 * a * slope:
                break
            if a * abs(slope) < 1e-15 * max(1.0, val):
                # no representable decrease left along the Gauss-Newton direction
                return psi
            a *= 0.5
        psi, r, val = cand, r_c, val_c
    raise EstimatorError("projection did not converge", step_norm)


# -- slate feature map with cached exploration widths -----------------------


class SlateFeatureMap:
    """x(u, s) built by concatenating per-item embedding blocks slot by slot.

    ``blocks`` is a list of (U, N, e_b) arrays; the slate embedding lays out
    block 0 for slots 1..M, then block 1 for slots 1..M, and so on.
    """

    def __init__(self, blocks: Sequence[np.ndarray], slate_size: int):
        self.blocks = [np.asarray(b, dtype=float) for b in blocks]
        self.slate_size = slate_size
        self.n_users, self.n_items = self.blocks[0].shape[:2]
        self.item_dim = sum(b.shape[2] for b in self.blocks)
        self.dim = slate_size * self.item_dim
        self.item_emb = np.concatenate(self.blocks, axis=2)  # (U, N, e)
        # flat indices receiving the item in slot i
        idx, offset = [], 0
        per_slot: list[list[np.ndarray]] = [[] for _ in range(slate_size)]
        for b in self.blocks:
            e = b.shape[2]
            for i in range(slate_size):
                per_slot[i].append(offset + i * e + np.arange(e))
            offset += slate_size * e
        self.slot_index = np.array([np.concatenate(p) for p in per_slot])  # (M, e)

    def __call__(self, user: int, slates) -> np.ndarray:
        s = np.atleast_2d(np.asarray(slates, dtype=np.int64))
        return np.hstack([b[user, s].reshape(len(s), -1) for b in self.blocks])

    def mean_quadratic_forms(self, W: np.ndarray, slates: np.ndarray) -> np.ndarray:
        """mean over users of x(u, s)^T W x(u, s) for each slate."""
        E, idx, M = self.item_emb, self.slot_index, self.slate_size
        B = W[idx[:, None, :, None], idx[None, :, None, :]]  # (M, M, e, e)
        T = np.einsum("uIa,ijab->uijIb", E, B)
        A = np.einsum("uijIb,uJb->ijIJ", T, E) / self.n_users
        out = np.zeros(len(slates))
        for i in range(M):
            for j in range(M):
                out += A[i, j, slates[:, i], slates[:, j]]
        return out

    def mean_squared_projections(self, w: np.ndarray, slates: np.ndarray) -> np.ndarray:
        """mean over users of (x(u, s)^T w)^2 for each slate."""
        a = np.einsum("uNe,me->umN", self.item_emb, w[self.slot_index])  # (U, M, N)
        proj = np.zeros((self.n_users, len(slates)))
        for i in range(self.slate_size):
            proj += a[:, i, slates[:, i]]
        return np.mean(proj**2, axis=0)


RANKER_MODES = ("qp", "greedy", "oblivious")


class QPRanker:
    """Optimistic ranker over the quality-popularity choice model.

    ``mode="greedy"`` drops the exploration bonus; ``mode="oblivious"``
    removes the popularity block from the model (features and parameters).

    ``bonus_scale`` and ``tau_scale`` multiply the exploration bonus and the
    saturation threshold. The estimate is refit once ``refit_every`` new
    records have been admitted; after each refit that interval is multiplied
    by ``refit_growth``, so the default of 1 refits on every admitted record.
    """

    oracle = False

    def __init__(
        self,
        env,
        mode: str = "qp",
        lam: float | None = None,
        delta: float = 0.05,
        rho_min: float = 0.5,
        bonus_scale: float = 1.0,
        tau_scale: float = 1.0,
        refit_every: int = 1,
        refit_growth: float = 1.0,
        budget: int = 1_000_000,
        grad_tol: float = 1e-8,
        trace: bool = False,
        psi_star: np.ndarray | None = None,
        recompute_every: int = 256,
    ):
        if mode not in RANKER_MODES:
            raise ValueError(f"unknown QP ranker mode {mode!r}")
        self.name = mode
        self.mode = mode
        self.M, self.N = env.slate_size, env.n_items
        self.kappa = np.asarray(env.rank_bias, dtype=float)
        self.utility_c = env.utility_c
        blocks = [env.quality_emb] if mode == "oblivious" else [env.quality_emb, env.popularity_emb]
        self.fmap = SlateFeatureMap(blocks, self.M)
        self.d_quality = self.M * env.d_q
        self.D = self.fmap.dim
        self.L_q, self.L_p = env.L_q, (0.0 if mode == "oblivious" else env.L_p)
        self.L = self.L_q + self.L_p
        self.lam = 1 / math.sqrt(self.L) if lam is None else float(lam)
        self.delta = delta
        self.rho_min = rho_min
        self.bonus_scale = 0.0 if mode == "greedy" else bonus_scale
        self.coef = bonus_coefficient(self.M, rho_min) if self.bonus_scale else 0.0
        self.tau = tau_scale * tau_min(self.M, env.dynamics.b_max, env.dynamics.alpha_min, self.N, delta)
        if refit_every < 1 or refit_growth < 1.0:
            raise ValueError("refit_every must be >= 1 and refit_growth >= 1")
        self.refit_every = refit_every
        self.refit_growth = refit_growth
        self._interval = float(refit_every)
        self.grad_tol = grad_tol
        self.recompute_every = recompute_every
        self.slates = enumerate_slates(self.N, self.M, budget)
        self.psi_star = None if psi_star is None else (psi_star[:, : self.d_quality] if mode == "oblivious" else psi_star)
        self.trace: list[dict] | None = [] if trace else None

        self.history = FilteredHistory(self.M, self.D, self.tau)
        self.V = self.lam * np.eye(self.D)
        self.W = np.eye(self.D) / self.lam
        self.psi_ml = np.zeros((self.M, self.D))
        self.psi = np.zeros((self.M, self.D))
        self.errors = 0
        self._pending = 0
        self._updates = 0
        self._widths = self.fmap.mean_quadratic_forms(self.W, self.slates) if self.bonus_scale else None
        self._user_x: dict[int, np.ndarray] = {}
        self._last_bonus = 0.0

    # -- helpers -----------------------------------------------------------
    def _features(self, user: int) -> np.ndarray:
        X = self._user_x.get(user)
        if X is None:
            X = self._user_x[user] = self.fmap(user, self.slates)
        return X

    def estimated_values(self, user: int, psi: np.ndarray | None = None) -> np.ndarray:
        """Estimated saturated value sum_i mu_i z_i(delta) for every slate."""
        psi = self.psi if psi is None else psi
        X = self._features(user)
        dq = self.d_quality
        q = X[:, :dq] @ psi[:, :dq].T
        logits = X @ psi.T + self.kappa
        z = choice_probs(logits)[:, 1:]
        mu = q
        if self.utility_c and self.mode != "oblivious":
            mu = q + self.utility_c * (X[:, dq:] @ psi[:, dq:].T)
        return np.sum(mu * z, axis=1)

    def bonuses(self, t: int) -> np.ndarray:
        if not self.bonus_scale:
            return np.zeros(len(self.slates))
        g = gamma_t(t, self.delta, self.M, self.D, self.L, self.lam)
        return self.bonus_scale * self.coef * g * np.sqrt(np.maximum(self._widths, 0.0))

    # -- ranker interface --------------------------------------------------
    def select(self, user: int, history) -> Slate:
        t = history.t
        scores = self.estimated_values(user)
        if self.bonus_scale:
            bonus = self.bonuses(t)
            scores = scores + bonus
        k = first_argmax(scores)
        self._last_bonus = float(bonus[k]) if self.bonus_scale else 0.0
        return tuple(int(i) for i in self.slates[k])

    def gate_open(self, counts: np.ndarray, slate: Slate) -> bool:
        return bool(np.all(counts[list(slate)] >= self.tau))

    def observe(self, user: int, slate: Slate, choice: int, history) -> None:
        counts = history.counts_before_last()
        if not self.gate_open(counts, slate):
            return
        x = self.fmap(user, [slate])[0]
        self.history.admit(user, slate, choice, x, t=len(history.log))
        self._update_design(x)
        self._pending += 1
        if self._pending >= self._interval:
            self.refit()
            self._interval *= self.refit_growth
        if self.trace is not None:
            self.trace.append(self._trace_row(len(history.log)))

    def _update_design(self, x: np.ndarray) -> None:
        self.V += np.outer(x, x)
        w = self.W @ x
        denom = 1.0 + float(x @ w)
        self.W -= np.outer(w, w) / denom
        self._updates += 1
        if self._widths is None:
            return
        if self._updates % self.recompute_every == 0:
            self.W = np.linalg.inv(self.V)
            self.W = 0.5 * (self.W + self.W.T)
            self._widths = self.fmap.mean_quadratic_forms(self.W, self.slates)
        else:
            self._widths = self._widths - self.fmap.mean_squared_projections(w, self.slates) / denom

    def refit(self) -> None:
        self._pending = 0
        try:
            psi_ml = fit_mle(self.history, self.lam, self.kappa, psi0=self.psi_ml, grad_tol=self.grad_tol)
            psi = project_mle(psi_ml, self.history, self.V, self.d_quality, self.L_q, self.L_p, self.kappa)
        except EstimatorError as exc:
            self.errors += 1
            logger.debug("refit failed, keeping previous estimate: %s", exc)
            return
        self.psi_ml, self.psi = psi_ml, psi

    def _trace_row(self, t: int) -> dict:
        row = {
            "t": t,
            "admitted": len(self.history),
            "min_eig_V": float(np.linalg.eigvalsh(self.V)[0]),
            "bonus": self._last_bonus,
        }
        if self.psi_star is not None:
            row["param_error"] = float(np.linalg.norm(self.psi - self.psi_star))
        return row
