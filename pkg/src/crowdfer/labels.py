"""Vote tallying, outlier rejection and label distributions.

Counts stay integer until :func:`normalize`. Ties in the majority are
broken by the lowest category index everywhere in the toolkit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import MalformedAnnotationError, UnusableItemError

FERPLUS_EMOTIONS = (
    "neutral",
    "happiness",
    "surprise",
    "sadness",
    "anger",
    "disgust",
    "fear",
    "contempt",
)

DEFAULT_OUTLIER_THRESHOLD = 1
SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class EmotionSet:
    names: tuple[str, ...] = FERPLUS_EMOTIONS

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise ValueError("an emotion set needs at least two categories")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate category names in {self.names}")

    @property
    def K(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __len__(self):
        return len(self.names)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class VoteCounts:
    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1:
            raise ValueError("counts must be a 1-d vector")
        if c.size and not np.issubdtype(c.dtype, np.integer):
            if not np.all(c == np.round(c)):
                raise ValueError("vote counts must be integers")
        c = c.astype(np.int64)
        if np.any(c < 0):
            raise ValueError("vote counts must be non-negative")
        object.__setattr__(self, "counts", _frozen(c))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def usable(self) -> bool:
        return self.total > 0

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    def __repr__(self):
        return f"VoteCounts(counts={self.counts.tolist()}, total={self.total})"

    def __eq__(self, other):
        if not isinstance(other, VoteCounts):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    def __hash__(self):
        return hash(self.counts.tobytes())


@dataclass(frozen=True)
class LabelDistribution:
    p: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ValueError("a distribution is a 1-d vector over K >= 2 categories")
        if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
            raise ValueError(f"probabilities must lie in [0, 1]: {p}")
        if abs(p.sum() - 1.0) > SUM_TOLERANCE:
            raise ValueError(f"distribution sums to {p.sum()!r}, not 1")
        object.__setattr__(self, "p", _frozen(p))

    @property
    def K(self) -> int:
        return self.p.shape[0]

    @classmethod
    def one_hot(cls, k: int, K: int) -> "LabelDistribution":
        p = np.zeros(K)
        p[k] = 1.0
        return cls(p)

    def __repr__(self):
        return f"LabelDistribution(p={np.round(self.p, 4).tolist()})"

    def __eq__(self, other):
        if not isinstance(other, LabelDistribution):
            return NotImplemented
        return np.array_equal(self.p, other.p)

    def __hash__(self):
        return hash(self.p.tobytes())


def tally_votes(annotations: Sequence[int], emotion_set: EmotionSet) -> VoteCounts:
    if len(annotations) == 0:
        raise MalformedAnnotationError("empty annotation list")
    K = emotion_set.K
    idx = np.asarray(annotations)
    if not np.issubdtype(idx.dtype, np.integer):
        raise MalformedAnnotationError(f"annotations must be integer indices, got {idx.dtype}")
    bad = idx[(idx < 0) | (idx >= K)]
    if bad.size:
        raise MalformedAnnotationError(f"category index {int(bad[0])} outside [0, {K})")
    return VoteCounts(np.bincount(idx, minlength=K))


def reject_outliers(counts: VoteCounts, threshold: int = DEFAULT_OUTLIER_THRESHOLD) -> VoteCounts:
    """Reset every count at or below ``threshold`` to zero.

    The result may have ``total == 0``; check ``.usable`` before normalizing.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    c = counts.counts
    return VoteCounts(np.where(c > threshold, c, 0))


def normalize(counts: VoteCounts) -> LabelDistribution:
    total = counts.total
    if total == 0:
        raise UnusableItemError("cannot normalize all-zero vote counts")
    return LabelDistribution(counts.counts / total)


def majority_class(dist: LabelDistribution | np.ndarray) -> int:
    p = dist.p if isinstance(dist, LabelDistribution) else np.asarray(dist)
    # np.argmax returns the first maximal index, which is the tie rule.
    return int(np.argmax(p))


# Vectorized forms used by the data pipeline; same semantics row by row.

def reject_outliers_batch(counts: np.ndarray, threshold: int = DEFAULT_OUTLIER_THRESHOLD) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    return np.where(counts > threshold, counts, 0)


def normalize_batch(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    totals = counts.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        raise UnusableItemError(f"{int((totals == 0).sum())} rows have all-zero counts")
    return counts / totals


def majority_batch(p: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(p), axis=1)
