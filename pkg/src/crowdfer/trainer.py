"""Minibatch SGD over label schemes, evaluation and the multi-trial protocol."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .augment import AffineParams, augment_batch
from .dataio import Dataset
from .labels import EmotionSet
from .schemes import Scheme, SchemeKind, admitted_mask_batch, batch_loss, batch_targets, draw_pld_batch
from .tensornet import Model, build_toy, build_vgg13

log = logging.getLogger(__name__)

# SeedSequence keys for the per-trial random streams
STREAM_INIT, STREAM_TRAIN = 0, 1


@dataclass
class TrainConfig:
    scheme: SchemeKind = field(default_factory=lambda: SchemeKind(Scheme.MV))
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.1
    lr_decay_at: float = 2.0 / 3.0  # fraction of epochs
    seed: int = 0
    trials: int = 5
    outlier_threshold: int = 1
    pld_per_visit: bool = False
    augment: Optional[AffineParams] = None
    arch: str = "toy"
    toy_blocks: int = 2
    toy_width: int = 16
    toy_hidden: int = 64
    toy_dropout: bool = True
    dtype: str = "float32"
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.scheme, str):
            self.scheme = SchemeKind.parse(self.scheme)
        if self.epochs < 1 or self.batch_size < 1 or self.trials < 1:
            raise ValueError("epochs, batch_size and trials must all be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.arch not in ("toy", "vgg13"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def lr_at(self, epoch: int) -> float:
        step = int(round(self.lr_decay_at * self.epochs))
        return self.learning_rate * (self.lr_decay if epoch >= step else 1.0)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.scheme.value
        d["ml_threshold"] = self.scheme.theta
        d["augment"] = None if self.augment is None else self.augment.as_dict()
        return d


def build_model(config: TrainConfig, input_size: int, K: int, seed: int) -> Model:
    if config.arch == "vgg13":
        return build_vgg13(input_size, K, seed=seed, dtype=config.dtype)
    drop = config.toy_dropout
    return build_toy(input_size, K, blocks=config.toy_blocks, width=config.toy_width,
                     hidden=config.toy_hidden, conv_dropout=0.25 if drop else 0.0,
                     dense_dropout=0.5 if drop else 0.0, seed=seed, dtype=config.dtype)


class SGD:
    """Momentum SGD: v <- mu*v - lr*g; w <- w + v."""

    def __init__(self, model: Model, momentum: float = 0.9):
        self.model = model
        self.momentum = momentum
        self.velocity = {(i, n): np.zeros_like(a) for i, n, a in model.parameters()}

    def step(self, grads: dict, lr: float):
        for i, n, a in self.model.parameters():
            v = self.velocity[(i, n)]
            v *= self.momentum
            v -= lr * grads[(i, n)]
            a += v
        self.model.touch()


@dataclass
class EpochStats:
    epoch: int
    loss: float
    lr: float


def _minibatch_grads(model, shadows, pool, x, targets, B, rng):
    """Forward/backward one minibatch; returns (per-example losses, grads).

    ``targets(q, rows)`` maps the training-mode output to dense targets, so
    ML picks its class from the same q the loss is taken on.
    """
    if pool is None:
        q, _, cache = model.forward(x, "train", rng)
        t = targets(q, slice(None))
        model.backward(cache, (q - t) / B)
        grads = {(i, n): g.copy() for i, n, g in model.gradients()}
        return batch_loss(t, q), grads

    chunks = np.array_split(np.arange(len(x)), len(shadows))
    streams = rng.spawn(len(shadows))

    def work(k):
        sh, idx = shadows[k], chunks[k]
        if idx.size == 0:
            return np.zeros(0), None
        q, _, cache = sh.forward(x[idx], "train", streams[k])
        t = targets(q, idx)
        sh.backward(cache, (q - t) / B)
        return batch_loss(t, q), {(i, n): g for i, n, g in sh.gradients()}

    results = list(pool.map(work, range(len(shadows))))
    grads = None
    for _, g in results:  # fixed reduction order
        if g is None:
            continue
        if grads is None:
            grads = {k: v.copy() for k, v in g.items()}
        else:
            for k in grads:
                grads[k] += g[k]
    return np.concatenate([r[0] for r in results]), grads


def train_epoch(model: Model, dataset: Dataset, config: TrainConfig, rng: np.random.Generator,
                optimizer: Optional[SGD] = None, epoch: int = 0, pool=None, shadows=None) -> EpochStats:
    """One pass over ``dataset`` in seeded shuffled minibatches.

    PLD labels are drawn for every example before the pass (or per batch
    with ``pld_per_visit``). Returns the mean per-example training loss.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    optimizer = optimizer or SGD(model, config.momentum)
    r_shuffle, r_pld, r_drop, r_aug = rng.spawn(4)
    lr = config.lr_at(epoch)
    scheme = config.scheme
    p_all = dataset.dist
    drawn_all = None
    if scheme.scheme is Scheme.PLD and not config.pld_per_visit:
        drawn_all = draw_pld_batch(p_all, r_pld)
    order = r_shuffle.permutation(n)
    total = 0.0
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        x = dataset.images[idx]
        if config.augment is not None:
            x = augment_batch(x, config.augment, r_aug)
        x = x[:, None].astype(model.dtype)
        p = p_all[idx]
        drawn = None
        if scheme.scheme is Scheme.PLD:
            drawn = drawn_all[idx] if drawn_all is not None else draw_pld_batch(p, r_pld)

        def targets(q, rows, p=p, drawn=drawn):
            return batch_targets(scheme, p[rows], q, None if drawn is None else drawn[rows])

        losses, grads = _minibatch_grads(model, shadows, pool, x, targets, len(idx), r_drop)
        total += float(np.sum(losses))
        optimizer.step(grads, lr)
    return EpochStats(epoch, total / n, lr)


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray
    per_trial: list
    mean: float
    stddev: float  # sample (n-1) standard deviation
    population_stddev: float
    single_trial: bool
    any_admitted_accuracy: Optional[float] = None
    best_trial: int = 0

    @property
    def n_test(self) -> int:
        return int(self.confusion.sum())

    def table_row(self, percent: bool = True) -> str:
        return format_mean_std(self.per_trial, percent)

    def as_dict(self, emotion_set: Optional[EmotionSet] = None) -> dict:
        names = emotion_set.names if emotion_set else [str(k) for k in range(len(self.confusion))]
        return {
            "accuracy": self.accuracy,
            "confusion": np.asarray(self.confusion).tolist(),
            "per_class_counts": dict(zip(names, np.asarray(self.confusion).sum(axis=1).tolist())),
            "per_trial": list(self.per_trial),
            "mean": self.mean,
            "stddev": self.stddev,
            "population_stddev": self.population_stddev,
            "single_trial": self.single_trial,
            "any_admitted_accuracy": self.any_admitted_accuracy,
            "best_trial": self.best_trial,
            "n_test": self.n_test,
            "table_row": self.table_row(),
        }


def trial_statistics(values) -> tuple[float, float, float]:
    """(mean, sample std, population std); both stds are 0 for one value."""
    a = np.asarray(values, dtype=np.float64)
    mean = float(a.mean())
    if a.size < 2:
        return mean, 0.0, 0.0
    return mean, float(a.std(ddof=1)), float(a.std(ddof=0))


def format_mean_std(values, percent: bool = True) -> str:
    """``83.852 ± 0.631 %`` style summary (population std, as in results tables)."""
    mean, _, pstd = trial_statistics(values)
    scale = 100.0 if percent and max(values) <= 1.0 else 1.0
    suffix = " %" if percent else ""
    return f"{mean * scale:.3f} ± {pstd * scale:.3f}{suffix}"


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256, theta: float = 0.3) -> EvalReport:
    """Accuracy of argmax q against the majority label; no augmentation, no dropout."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    K = dataset.dist.shape[1]
    q = model.predict(dataset.images[:, None], batch_size)
    pred = np.argmax(q, axis=1)
    truth = np.argmax(dataset.dist, axis=1)
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    acc = float(np.trace(confusion)) / n
    admitted = admitted_mask_batch(dataset.dist, theta)
    any_acc = float(np.mean(admitted[np.arange(n), pred]))
    return EvalReport(acc, confusion, [acc], acc, 0.0, 0.0, True, any_acc, 0)


def _val_metrics(model: Model, val: Dataset):
    q = model.predict(val.images[:, None])
    ce = float(np.mean(batch_loss(val.dist, q)))
    acc = float(np.mean(np.argmax(q, axis=1) == val.majority))
    return ce, acc


@dataclass
class TrialOutcome:
    trial: int
    seed: int
    report: EvalReport
    history: list
    model: Optional[Model] = None


def fit(model: Model, train: Dataset, config: TrainConfig, rng: np.random.Generator,
        val: Optional[Dataset] = None) -> list[dict]:
    optimizer = SGD(model, config.momentum)
    history = []
    pool, shadows = None, None
    if config.workers > 1:
        pool = ThreadPoolExecutor(config.workers)
        shadows = [model.shadow() for _ in range(config.workers)]
    try:
        for epoch in range(config.epochs):
            stats = train_epoch(model, train, config, rng, optimizer, epoch, pool, shadows)
            row = {"epoch": epoch, "train_loss": stats.loss, "lr": stats.lr}
            if val is not None and len(val):
                row["val_loss"], row["val_accuracy"] = _val_metrics(model, val)
            history.append(row)
            log.info("epoch %d %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
    finally:
        if pool is not None:
            pool.shutdown()
    return history


def trial_rngs(seed: int):
    """(init seed, training stream) for one trial."""
    init = int(np.random.SeedSequence([seed, STREAM_INIT]).generate_state(1)[0])
    return init, np.random.default_rng(np.random.SeedSequence([seed, STREAM_TRAIN]))


def run_trials(dataset: Dataset, config: TrainConfig, *, same_seed: bool = False,
               keep_models: bool = False,
               on_trial_end: Optional[Callable[[TrialOutcome], None]] = None):
    """Train from scratch ``config.trials`` times and test each model.

    Trial i uses seed ``config.seed + i`` (or ``config.seed`` throughout with
    ``same_seed``). The returned report's accuracy and confusion are those
    of the best trial; mean and spread cover all trials.
    """
    train, val, test = (dataset.select(s) for s in ("train", "validation", "test"))
    if len(train) == 0 or len(test) == 0:
        raise ValueError("dataset needs non-empty train and test splits")
    K = dataset.dist.shape[1]
    outcomes = []
    for i in range(config.trials):
        seed = config.seed if same_seed else config.seed + i
        init_seed, rng = trial_rngs(seed)
        model = build_model(config, dataset.image_size, K, init_seed)
        history = fit(model, train, config, rng, val)
        report = evaluate(model, test, theta=config.scheme.theta)
        out = TrialOutcome(i, seed, report, history, model if keep_models else None)
        log.info("trial %d (seed %d): accuracy %.4f", i, seed, report.accuracy)
        if on_trial_end is not None:
            on_trial_end(out if keep_models else TrialOutcome(i, seed, report, history, model))
        outcomes.append(out)
    return summarize(outcomes), outcomes


def summarize(outcomes: list[TrialOutcome]) -> EvalReport:
    accs = [o.report.accuracy for o in outcomes]
    best = int(np.argmax(accs))
    mean, sd, psd = trial_statistics(accs)
    b = outcomes[best].report
    return EvalReport(b.accuracy, b.confusion, accs, mean, sd, psd, len(accs) == 1,
                      b.any_admitted_accuracy, best)
