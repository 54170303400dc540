"""Training targets, losses and logit gradients for the four label schemes.

* ``mv``  - one-hot at the majority emotion, plain cross-entropy.
* ``ml``  - every emotion with vote share above theta is admissible; the
  loss is taken on whichever admitted emotion the network currently rates
  highest.
* ``pld`` - a one-hot target drawn from the vote distribution, redrawn
  each epoch.
* ``cel`` - cross-entropy against the full vote distribution.

Per-example losses clamp q at ``LOG_EPS`` before the log. Gradients use the
closed form ``q - t`` and need no clamp.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .labels import LabelDistribution, majority_class

LOG_EPS = 1e-12
DEFAULT_ML_THRESHOLD = 0.30


class Scheme(str, enum.Enum):
    MV = "mv"
    ML = "ml"
    PLD = "pld"
    CEL = "cel"


@dataclass(frozen=True)
class SchemeKind:
    scheme: Scheme
    theta: float = DEFAULT_ML_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"ML threshold must be in (0, 1), got {self.theta}")

    @classmethod
    def parse(cls, name: str, theta: float = DEFAULT_ML_THRESHOLD) -> "SchemeKind":
        return cls(Scheme(name.lower()), theta)

    def __str__(self):
        if self.scheme is Scheme.ML:
            return f"ml(theta={self.theta:g})"
        return self.scheme.value


@dataclass(frozen=True)
class TrainingTarget:
    """One of ``one_hot`` (index), ``admitted_set`` (mask) or ``distribution`` (p)."""

    kind: str
    K: int
    index: Optional[int] = None
    mask: Optional[np.ndarray] = field(default=None, repr=False)
    p: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind == "one_hot":
            if self.index is None or not 0 <= self.index < self.K:
                raise ValueError(f"one-hot index {self.index} outside [0, {self.K})")
        elif self.kind == "admitted_set":
            if self.mask is None or self.mask.shape != (self.K,) or not self.mask.any():
                raise ValueError("admitted set must be a length-K mask with a true entry")
        elif self.kind == "distribution":
            LabelDistribution(self.p)
        else:
            raise ValueError(f"unknown target kind {self.kind!r}")

    @classmethod
    def one_hot(cls, index: int, K: int) -> "TrainingTarget":
        return cls("one_hot", K, index=int(index))

    @classmethod
    def distribution(cls, dist: LabelDistribution) -> "TrainingTarget":
        return cls("distribution", dist.K, p=dist.p)

    def vector(self) -> np.ndarray:
        """Dense length-K target (admitted sets become their indicator)."""
        if self.kind == "one_hot":
            t = np.zeros(self.K)
            t[self.index] = 1.0
            return t
        if self.kind == "admitted_set":
            return self.mask.astype(np.float64)
        return np.array(self.p, dtype=np.float64)


@dataclass(frozen=True)
class PredictedDistribution:
    q: np.ndarray = field(repr=False)
    logits: np.ndarray = field(repr=False)

    @classmethod
    def from_logits(cls, logits) -> "PredictedDistribution":
        logits = np.asarray(logits, dtype=np.float64)
        return cls(softmax(logits), logits)

    @property
    def K(self) -> int:
        return self.q.shape[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _neg_log(q: float) -> float:
    return float(-np.log(max(float(q), LOG_EPS)))


# -- targets ---------------------------------------------------------------

def target_mv(dist: LabelDistribution) -> TrainingTarget:
    return TrainingTarget.one_hot(majority_class(dist), dist.K)


def admitted_set(dist: LabelDistribution, theta: float = DEFAULT_ML_THRESHOLD) -> TrainingTarget:
    """Emotions whose vote share strictly exceeds ``theta``.

    Falls back to the majority alone when nothing clears the threshold, so
    every example still has a finite loss.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0, 1), got {theta}")
    mask = dist.p > theta
    if not mask.any():
        mask = np.zeros(dist.K, dtype=bool)
        mask[majority_class(dist)] = True
    return TrainingTarget("admitted_set", dist.K, mask=mask)


def draw_pld(dist: LabelDistribution, rng: np.random.Generator) -> TrainingTarget:
    return TrainingTarget.one_hot(_draw_index(dist.p, rng.random()), dist.K)


def _draw_index(p: np.ndarray, u: float) -> int:
    # inverse CDF: count the cumulative masses <= u * total. A zero-mass
    # class shares its cdf value with its predecessor, so it is never chosen.
    cdf = np.cumsum(p)
    return int(np.count_nonzero(cdf <= u * cdf[-1]))


# -- losses ----------------------------------------------------------------

def loss_ce(target: TrainingTarget, pred: PredictedDistribution) -> float:
    if target.kind == "one_hot":
        return _neg_log(pred.q[target.index])
    if target.kind == "distribution":
        logq = np.log(np.maximum(pred.q, LOG_EPS))
        nz = target.p > 0
        return float(-np.sum(target.p[nz] * logq[nz]))
    raise ValueError("cross-entropy needs a one-hot or distribution target")


def ml_choice(dist: LabelDistribution, q: np.ndarray, theta: float = DEFAULT_ML_THRESHOLD) -> int:
    mask = admitted_set(dist, theta).mask
    return int(np.argmax(np.where(mask, q, -np.inf)))


def loss_ml(dist: LabelDistribution, pred: PredictedDistribution,
            theta: float = DEFAULT_ML_THRESHOLD) -> tuple[float, int]:
    chosen = ml_choice(dist, pred.q, theta)
    return _neg_log(pred.q[chosen]), chosen


def scheme_target(scheme: SchemeKind, dist: LabelDistribution, pred: PredictedDistribution,
                  drawn: Optional[TrainingTarget] = None) -> TrainingTarget:
    """The concrete cross-entropy target ``t`` for one example."""
    s = scheme.scheme
    if s is Scheme.MV:
        return target_mv(dist)
    if s is Scheme.ML:
        return TrainingTarget.one_hot(ml_choice(dist, pred.q, scheme.theta), dist.K)
    if s is Scheme.PLD:
        if drawn is None:
            raise ValueError("PLD needs the drawn target for this epoch")
        if drawn.kind != "one_hot":
            raise ValueError("PLD draws are one-hot")
        return drawn
    return TrainingTarget.distribution(dist)


def scheme_loss(scheme: SchemeKind, dist: LabelDistribution, pred: PredictedDistribution,
                drawn: Optional[TrainingTarget] = None) -> float:
    return loss_ce(scheme_target(scheme, dist, pred, drawn), pred)


def grad_logits(scheme: SchemeKind, dist: LabelDistribution, pred: PredictedDistribution,
                drawn: Optional[TrainingTarget] = None) -> np.ndarray:
    """d(loss)/d(logits) = q - t for the scheme's target t."""
    t = scheme_target(scheme, dist, pred, drawn).vector()
    return pred.q - t


# -- batched forms used by the trainer --------------------------------------

def draw_pld_batch(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One drawn class index per row of ``p`` (N, K)."""
    p = np.asarray(p, dtype=np.float64)
    u = rng.random(p.shape[0])
    cdf = np.cumsum(p, axis=1)
    return np.count_nonzero(cdf <= (u * cdf[:, -1])[:, None], axis=1).astype(np.int64)


def admitted_mask_batch(p: np.ndarray, theta: float) -> np.ndarray:
    mask = p > theta
    empty = ~mask.any(axis=1)
    if empty.any():
        mask[empty, np.argmax(p[empty], axis=1)] = True
    return mask


def batch_targets(scheme: SchemeKind, p: np.ndarray, q: np.ndarray,
                  drawn: Optional[np.ndarray] = None) -> np.ndarray:
    """Dense (N, K) cross-entropy targets for a minibatch."""
    N, K = p.shape
    s = scheme.scheme
    if s is Scheme.CEL:
        return np.array(p, dtype=np.float64)
    if s is Scheme.MV:
        idx = np.argmax(p, axis=1)
    elif s is Scheme.ML:
        mask = admitted_mask_batch(p, scheme.theta)
        idx = np.argmax(np.where(mask, q, -np.inf), axis=1)
    else:
        if drawn is None:
            raise ValueError("PLD needs drawn labels")
        idx = np.asarray(drawn)
    t = np.zeros((N, K))
    t[np.arange(N), idx] = 1.0
    return t


def batch_loss(targets: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-example cross-entropy for dense targets; zero-weight terms skipped."""
    logq = np.log(np.maximum(q, LOG_EPS))
    return -np.sum(np.where(targets > 0, targets * logq, 0.0), axis=1)
