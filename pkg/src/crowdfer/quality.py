"""Tagger-count versus label-quality analysis and synthetic taggers.

For each item the reference label is the majority over all T tags. The
agreement at m taggers is the fraction of random m-tag subsets (drawn
without replacement) whose own majority matches that reference, averaged
over items and resamples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TaggerNoiseModel:
    """Row-stochastic confusion: row = true emotion, column = reported emotion."""

    confusion: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.confusion, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion must be square, got {c.shape}")
        if np.any(c < 0) or np.any(np.abs(c.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("confusion rows must be non-negative and sum to 1")
        object.__setattr__(self, "confusion", c)

    @property
    def K(self) -> int:
        return self.confusion.shape[0]

    @classmethod
    def symmetric(cls, K: int, noise: float) -> "TaggerNoiseModel":
        """Correct with probability 1-noise, otherwise uniform over the K-1 others."""
        if not 0.0 <= noise <= 1.0:
            raise ValueError("noise must be in [0, 1]")
        c = np.full((K, K), noise / (K - 1))
        np.fill_diagonal(c, 1.0 - noise)
        return cls(c)

    @classmethod
    def identity(cls, K: int) -> "TaggerNoiseModel":
        return cls(np.eye(K))

    @classmethod
    def uniform(cls, K: int) -> "TaggerNoiseModel":
        return cls(np.full((K, K), 1.0 / K))


@dataclass
class QualityCurve:
    points: list  # (m, agreement)
    n_items: int
    n_resamples: int

    def agreement(self, m: int) -> float:
        return dict(self.points)[m]

    def to_tsv(self) -> str:
        lines = ["m\tagreement\tn_items\tn_resamples"]
        lines += [f"{m}\t{a:.6f}\t{self.n_items}\t{self.n_resamples}" for m, a in self.points]
        return "\n".join(lines) + "\n"


def synth_votes(true_labels, noise: TaggerNoiseModel, T: int, rng: np.random.Generator) -> np.ndarray:
    """(n_items, T) array of tags, each drawn independently from the item's confusion row."""
    if T < 1:
        raise ValueError("T must be >= 1")
    true_labels = np.asarray(true_labels, dtype=np.int64)
    cdf = np.cumsum(noise.confusion, axis=1)[true_labels]  # (n, K)
    u = rng.random((true_labels.shape[0], T))
    tags = (u[:, :, None] >= cdf[:, None, :]).sum(axis=2)
    return np.minimum(tags, noise.K - 1)


def _row_majority(tags: np.ndarray, K: int) -> np.ndarray:
    counts = np.zeros((tags.shape[0], K), dtype=np.int64)
    np.add.at(counts, (np.arange(tags.shape[0])[:, None], tags), 1)
    return np.argmax(counts, axis=1)


def subsample_agreement(tags, m: int, n_resamples: int, rng: np.random.Generator,
                        K: int | None = None) -> float:
    tags = np.asarray(tags, dtype=np.int64)
    if tags.ndim != 2:
        raise ValueError("tags must be (n_items, T)")
    n, T = tags.shape
    if not 1 <= m <= T:
        raise ValueError(f"m={m} must lie in [1, {T}]")
    K = int(tags.max()) + 1 if K is None else K
    reference = _row_majority(tags, K)
    if m == T:
        return 1.0
    hits = 0
    for _ in range(n_resamples):
        order = np.argsort(rng.random((n, T)), axis=1)[:, :m]
        sub = np.take_along_axis(tags, order, axis=1)
        hits += int(np.sum(_row_majority(sub, K) == reference))
    return hits / (n * n_resamples)


def quality_curve(tags, n_resamples: int, rng: np.random.Generator, K: int | None = None) -> QualityCurve:
    tags = np.asarray(tags, dtype=np.int64)
    T = tags.shape[1]
    points = [(m, subsample_agreement(tags, m, n_resamples, rng, K)) for m in range(1, T + 1)]
    return QualityCurve(points, tags.shape[0], n_resamples)


def tags_to_counts(tags, K: int) -> np.ndarray:
    tags = np.asarray(tags, dtype=np.int64)
    counts = np.zeros((tags.shape[0], K), dtype=np.int64)
    np.add.at(counts, (np.arange(tags.shape[0])[:, None], tags), 1)
    return counts
