"""Slate enumeration and exact/greedy argmax over ordered slates."""
from __future__ import annotations

import itertools
import logging
import math
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import EnumerationBudgetError

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 1_000_000
# relative tolerance under which objective values count as tied
TIE_RTOL = 1e-12

Slate = tuple[int, ...]


def count_slates(n_items: int, slate_size: int) -> int:
    return math.perm(n_items, slate_size)


def validate_slate(slate: Sequence[int], n_items: int, slate_size: int) -> Slate:
    items = tuple(int(i) for i in slate)
    if len(items) != slate_size:
        raise ValueError(f"slate must hold exactly {slate_size} items, got {len(items)}")
    if len(set(items)) != len(items):
        raise ValueError(f"slate items must be distinct: {items}")
    if any(i < 0 or i >= n_items for i in items):
        raise ValueError(f"unknown item in slate {items} (corpus size {n_items})")
    return items


@lru_cache(maxsize=32)
def _enumerate(n_items: int, slate_size: int) -> np.ndarray:
    slates = np.array(list(itertools.permutations(range(n_items), slate_size)), dtype=np.int64)
    slates.setflags(write=False)
    return slates


def enumerate_slates(n_items: int, slate_size: int, budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """All ordered slates as an (S, M) array, in lexicographic order."""
    n = count_slates(n_items, slate_size)
    if n > budget:
        raise EnumerationBudgetError(
            f"{n} ordered slates exceed the enumeration budget {budget}; "
            "use slate_argmax_greedy for large corpora"
        )
    return _enumerate(n_items, slate_size)


def first_argmax(values: np.ndarray) -> int:
    """Index of the first value tied (within TIE_RTOL) with the maximum."""
    values = np.asarray(values, dtype=float)
    best = values.max()
    tol = TIE_RTOL * max(1.0, abs(best))
    return int(np.flatnonzero(values >= best - tol)[0])


def slate_argmax_enumerate(
    objective: Callable[[Slate], float],
    n_items: int,
    slate_size: int,
    budget: int = DEFAULT_BUDGET,
) -> Slate:
    """Exhaustive maximizer; ties go to the lexicographically smallest slate."""
    slates = enumerate_slates(n_items, slate_size, budget)
    values = np.array([objective(tuple(int(i) for i in s)) for s in slates])
    return tuple(int(i) for i in slates[first_argmax(values)])


def slate_argmax_greedy(
    objective: Callable[[Slate], float],
    n_items: int,
    slate_size: int,
) -> Slate:
    """Approximate maximizer filling one position at a time.

    Each candidate for position k is scored on the slate completed with the
    lowest-index unused items.
    """
    logger.warning("position-greedy slate argmax in use; result is approximate")
    chosen: list[int] = []
    for _ in range(slate_size):
        best_val, best_item = -np.inf, None
        for cand in range(n_items):
            if cand in chosen:
                continue
            used = set(chosen) | {cand}
            fill = [i for i in range(n_items) if i not in used][: slate_size - len(chosen) - 1]
            val = objective(tuple(chosen + [cand] + fill))
            if val > best_val + TIE_RTOL * max(1.0, abs(best_val) if np.isfinite(best_val) else 1.0):
                best_val, best_item = val, cand
        chosen.append(best_item)
    return tuple(chosen)
