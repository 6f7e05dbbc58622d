"""Ranking policies and the name-based ranker factory.

Every ranker exposes ``select(user, history) -> slate`` and
``observe(user, slate, choice, history)``; ``observe`` is called after the
environment has recorded the step.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .choice import choice_probs
from .environment import EnvironmentInstance, SelectionHistory
from .errors import ConfigError, EnumerationBudgetError
from .qp import QPRanker
from .slates import (
    DEFAULT_BUDGET,
    Slate,
    enumerate_slates,
    first_argmax,
    slate_argmax_greedy,
)

RANKER_NAMES = ("qp", "quality", "popularity-driven", "greedy", "oblivious")


def saturated_value(env: EnvironmentInstance, user: int, slates) -> np.ndarray:
    """sum_i mu_i z_i(q + b + kappa) with every popularity term at its cap."""
    q = env.quality(user, slates)
    b = env.caps(user, slates)
    z = choice_probs(q + b + env.rank_bias)[:, 1:]
    return np.sum(env.utility(q, b) * z, axis=1)


def quality_ranker_slate(env: EnvironmentInstance, user: int, budget: int = DEFAULT_BUDGET) -> Slate:
    """Oracle argmax of the saturated value; lowest slate wins ties."""
    try:
        slates = enumerate_slates(env.n_items, env.slate_size, budget)
    except EnumerationBudgetError:
        return slate_argmax_greedy(lambda s: float(saturated_value(env, user, [s])[0]), env.n_items, env.slate_size)
    return tuple(int(i) for i in slates[first_argmax(saturated_value(env, user, slates))])


class QualityRanker:
    """Stationary quality ranker; reads the true qualities and caps."""

    name = "quality"
    oracle = True

    def __init__(self, env: EnvironmentInstance, budget: int = DEFAULT_BUDGET):
        self.env = env
        self.budget = budget
        self._cache: dict[int, Slate] = {}

    def select(self, user: int, history: SelectionHistory) -> Slate:
        slate = self._cache.get(user)
        if slate is None:
            slate = self._cache[user] = quality_ranker_slate(self.env, user, self.budget)
        return slate

    def observe(self, user, slate, choice, history) -> None:
        pass


def popularity_driven_slate(counts: Sequence[int], previous: Sequence[int], slate_size: int) -> Slate:
    """Top-M items by selection count.

    Equal counts never rerank: items of the previous slate keep their
    relative order and precede tied outsiders, which fall back to item index.
    """
    prev_pos = {item: pos for pos, item in enumerate(previous)}
    n = len(counts)
    order = sorted(range(n), key=lambda i: (-counts[i], prev_pos.get(i, n + i)))
    return tuple(order[:slate_size])


class PopularityDrivenRanker:
    name = "popularity-driven"
    oracle = False

    def __init__(self, n_items: int, slate_size: int, rng: np.random.Generator):
        if slate_size > n_items:
            raise ValueError("slate size exceeds corpus size")
        self.slate_size = slate_size
        # initial slate drawn uniformly among ordered slates
        self.previous: Slate = tuple(int(i) for i in rng.permutation(n_items)[:slate_size])
        self.reranks = 0

    def select(self, user: int, history: SelectionHistory) -> Slate:
        slate = popularity_driven_slate(history.counts, self.previous, self.slate_size)
        if slate != self.previous:
            self.reranks += 1
        self.previous = slate
        return slate

    def observe(self, user, slate, choice, history) -> None:
        pass


def greedy_slate(ranker: QPRanker, user: int) -> Slate:
    """Estimated-value argmax without exploration bonus."""
    return tuple(int(i) for i in ranker.slates[first_argmax(ranker.estimated_values(user))])


def oblivious_slate(ranker: QPRanker, user: int, t: int) -> Slate:
    """Argmax for a ranker built with ``mode='oblivious'`` (bonus retained)."""
    if ranker.mode != "oblivious":
        raise ValueError("oblivious_slate needs an oblivious-mode ranker")
    scores = ranker.estimated_values(user) + ranker.bonuses(t)
    return tuple(int(i) for i in ranker.slates[first_argmax(scores)])


def make_ranker(name: str, env: EnvironmentInstance, rng: np.random.Generator, **params):
    """Build a ranker from its config name.

    ``params`` are passed to the QP family (lam, delta, rho_min, bonus_scale,
    tau_scale, refit_every, refit_growth, budget, grad_tol, trace, psi_star); the other
    rankers accept ``budget`` only.
    """
    budget = int(params.get("budget", DEFAULT_BUDGET))
    if name == "quality":
        return QualityRanker(env, budget)
    if name == "popularity-driven":
        return PopularityDrivenRanker(env.n_items, env.slate_size, rng)
    if name in ("qp", "greedy", "oblivious"):
        return QPRanker(env, mode=name, **params)
    raise ConfigError(f"unknown ranker {name!r}; expected one of {RANKER_NAMES}")
