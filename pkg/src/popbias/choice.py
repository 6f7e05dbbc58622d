"""Softmax user-choice model with an implicit no-click option.

Items on a slate are indexed 1..M; index 0 is reserved for "no click".
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

DISPOSITION_BOUND = 3.0


@dataclass(frozen=True)
class ChoiceDistribution:
    item_probs: np.ndarray
    no_click_prob: float

    @property
    def slate_size(self) -> int:
        return len(self.item_probs)

    def as_array(self) -> np.ndarray:
        """Probabilities indexed by choice index (0 = no click)."""
        return np.concatenate(([self.no_click_prob], self.item_probs))


@dataclass(frozen=True)
class BiasTriple:
    quality: np.ndarray
    popularity: np.ndarray
    rank: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.quality), np.shape(self.popularity), np.shape(self.rank)}
        if len(shapes) != 1:
            raise ValueError(f"bias vectors must share one length, got shapes {sorted(shapes)}")


def _as_dispositions(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("dispositions must be a non-empty 1-d vector")
    return arr


def disposition(bias: BiasTriple) -> np.ndarray:
    """Elementwise quality + popularity + rank bias."""
    q = np.asarray(bias.quality, dtype=float)
    b = np.asarray(bias.popularity, dtype=float)
    k = np.asarray(bias.rank, dtype=float)
    if not (q.shape == b.shape == k.shape):
        raise ValueError("quality, popularity and rank vectors must share one length")
    return q + b + k


def softmax_choice(dispositions) -> ChoiceDistribution:
    """Choice probabilities exp(d_i) / (1 + sum_j exp(d_j)) and the no-click remainder."""
    d = _as_dispositions(dispositions)
    hi, lo = float(d.max()), float(d.min())
    if not (math.isfinite(hi) and math.isfinite(lo)):
        raise ValueError("dispositions must be finite")
    if hi > DISPOSITION_BOUND or lo < -DISPOSITION_BOUND:
        logger.warning("disposition outside [-%g, %g]: %s", DISPOSITION_BOUND, DISPOSITION_BOUND, d)
    # the no-click option carries an implicit zero logit
    shift = max(0.0, hi)
    e = np.exp(d - shift)
    e0 = math.exp(-shift)
    denom = e0 + float(e.sum())
    return ChoiceDistribution(item_probs=e / denom, no_click_prob=e0 / denom)


def choice_probs(logits: np.ndarray) -> np.ndarray:
    """Batched softmax with outside option.

    ``logits`` has shape (..., M). Returns shape (..., M + 1) with column 0 the
    no-click probability. No range checks; used on estimator iterates.
    """
    logits = np.asarray(logits, dtype=float)
    shift = np.maximum(logits.max(axis=-1, keepdims=True), 0.0)
    e = np.exp(logits - shift)
    e0 = np.exp(-shift)
    denom = e0 + e.sum(axis=-1, keepdims=True)
    return np.concatenate((e0, e), axis=-1) / denom


def sample_choice(dist: ChoiceDistribution, rng: np.random.Generator) -> int:
    """Draw a choice index using exactly one uniform variate."""
    u = rng.random()
    cdf = np.cumsum(dist.item_probs)
    idx = int(np.searchsorted(cdf, u, side="right"))
    return idx + 1 if idx < dist.slate_size else 0
