"""A small numpy CNN: 3x3 conv, 2x2 max-pool, dropout, dense, ReLU, softmax.

Activations are laid out (N, C, H, W). Every layer caches what its
backward pass needs; :meth:`Model.backward` takes the gradient of the loss
with respect to the pre-softmax logits and returns one gradient dict per
layer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GradientCheckRefused, ShapeMismatchError, StaleCacheError
from .schemes import SchemeKind, batch_loss, batch_targets, softmax

LAYER_KINDS = ("conv", "maxpool", "dropout", "dense", "relu", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0  # conv kernels or dense units
    rate: float = 0.0  # dropout only

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "dense") and self.size < 1:
            raise ValueError(f"{self.kind} needs at least one unit")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate {self.rate} outside [0, 1)")

    def to_dict(self):
        return {"kind": self.kind, "size": self.size, "rate": self.rate}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], int(d.get("size", 0)), float(d.get("rate", 0.0)))

    def __str__(self):
        if self.kind in ("conv", "dense"):
            return f"{self.kind}{self.size}"
        if self.kind == "dropout":
            return f"drop{self.rate:g}"
        return self.kind


def conv(n):
    return LayerSpec("conv", n)


def dense(n):
    return LayerSpec("dense", n)


def dropout(rate):
    return LayerSpec("dropout", rate=rate)


MAXPOOL = LayerSpec("maxpool")
RELU = LayerSpec("relu")
SOFTMAX = LayerSpec("softmax")


# -- layers ----------------------------------------------------------------

class Layer:
    param_names: tuple[str, ...] = ()

    def __init__(self, spec: LayerSpec, in_shape: tuple, index: int):
        self.spec = spec
        self.index = index
        self.in_shape = tuple(in_shape)
        self.out_shape = self.infer_shape(self.in_shape)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def infer_shape(self, in_shape):
        return in_shape

    def init_params(self, rng, dtype):
        pass

    def forward(self, x, train, rng):
        raise NotImplementedError

    def backward(self, grad, cache):
        raise NotImplementedError

    def pattern(self, cache) -> Optional[np.ndarray]:
        """Discrete branch taken in forward (ReLU signs, pool argmax)."""
        return None

    def fail(self, msg):
        raise ShapeMismatchError(self.index, f"{self.spec}: {msg}")


class Conv3x3(Layer):
    """3x3 kernels, stride 1, zero padding 1."""

    param_names = ("W", "b")

    def infer_shape(self, in_shape):
        if len(in_shape) != 3:
            self.fail(f"expects (C, H, W) input, got {in_shape}")
        _, h, w = in_shape
        return (self.spec.size, h, w)

    def init_params(self, rng, dtype):
        c = self.in_shape[0]
        fan_in = c * 9
        self.params["W"] = (rng.standard_normal((self.spec.size, c, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(self.spec.size, dtype=dtype)

    def forward(self, x, train, rng):
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        # (N, C, H, W, 3, 3) -> rows (N*H*W, C*9)
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
        wmat = self.params["W"].reshape(self.spec.size, c * 9)
        out = cols @ wmat.T + self.params["b"]
        out = out.reshape(n, h, w, self.spec.size).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (cols, x.shape)

    def backward(self, grad, cache):
        cols, (n, c, h, w) = cache
        o = self.spec.size
        g = grad.transpose(0, 2, 3, 1).reshape(n * h * w, o)
        self.grads["W"] = (g.T @ cols).reshape(self.params["W"].shape)
        self.grads["b"] = g.sum(axis=0)
        dcols = (g @ self.params["W"].reshape(o, c * 9)).reshape(n, h, w, c, 3, 3)
        dxp = np.zeros((n, c, h + 2, w + 2), dtype=grad.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1]


class MaxPool2x2(Layer):
    def infer_shape(self, in_shape):
        if len(in_shape) != 3:
            self.fail(f"expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if h % 2 or w % 2 or h < 2 or w < 2:
            self.fail(f"2x2 pooling needs even spatial size, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x, train, rng):
        n, c, h, w = x.shape
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        arg = blocks.argmax(axis=-1)  # first max wins ties
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, grad, cache):
        arg, (n, c, h, w) = cache
        blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(blocks, arg[..., None], grad[..., None], axis=-1)
        return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    def pattern(self, cache):
        return cache[0]


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) during training."""

    def forward(self, x, train, rng):
        rate = self.spec.rate
        if not train or rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError(f"layer {self.index}: dropout in train mode needs an rng")
        mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
        return x * mask, mask

    def backward(self, grad, cache):
        return grad if cache is None else grad * cache


class Dense(Layer):
    param_names = ("W", "b")

    def infer_shape(self, in_shape):
        return (self.spec.size,)

    def init_params(self, rng, dtype):
        fan_in = int(np.prod(self.in_shape))
        self.params["W"] = (rng.standard_normal((fan_in, self.spec.size)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(self.spec.size, dtype=dtype)

    def forward(self, x, train, rng):
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.params["W"] + self.params["b"], (flat, x.shape)

    def backward(self, grad, cache):
        flat, shape = cache
        self.grads["W"] = flat.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return (grad @ self.params["W"].T).reshape(shape)


class ReLU(Layer):
    def forward(self, x, train, rng):
        on = x > 0
        return np.where(on, x, 0).astype(x.dtype, copy=False), on

    def backward(self, grad, cache):
        return np.where(cache, grad, 0).astype(grad.dtype, copy=False)

    def pattern(self, cache):
        return cache


class Softmax(Layer):
    def infer_shape(self, in_shape):
        if len(in_shape) != 1:
            self.fail(f"softmax expects a flat vector, got {in_shape}")
        return in_shape


_LAYER_TYPES = {"conv": Conv3x3, "maxpool": MaxPool2x2, "dropout": Dropout,
                "dense": Dense, "relu": ReLU, "softmax": Softmax}


# -- model -----------------------------------------------------------------

@dataclass
class ForwardCache:
    model_id: int
    version: int
    train: bool
    batched: bool
    layer_caches: list = field(repr=False)

    def patterns(self, model) -> list:
        return [layer.pattern(c) for layer, c in zip(model.layers, self.layer_caches)
                if layer.pattern(c) is not None]


class Model:
    """Sequential network ending in a softmax layer.

    ``forward`` returns probabilities, logits and a cache; ``backward``
    consumes a gradient at the logits. Any parameter change must go through
    :meth:`touch` (the optimizer and loaders do this) so old caches are
    detected as stale.
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int],
                 seed: int = 0, dtype=np.float64, name: str = "custom"):
        specs = list(specs)
        if not specs or specs[-1].kind != "softmax":
            raise ValueError("the last layer must be softmax")
        if any(s.kind == "softmax" for s in specs[:-1]):
            raise ValueError("softmax may only appear as the final layer")
        self.specs = specs
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        self.name = name
        self.seed = seed
        self.version = 0
        self.layers: list[Layer] = []
        shape = self.input_shape
        for i, spec in enumerate(specs):
            layer = _LAYER_TYPES[spec.kind](spec, shape, i)
            self.layers.append(layer)
            shape = layer.out_shape
        if len(shape) != 1:
            raise ShapeMismatchError(len(specs) - 1, f"network output must be a vector, got {shape}")
        self.K = shape[0]
        init_rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init_params(init_rng, self.dtype)

    # parameters

    def parameters(self):
        """(layer index, name, array) for every trainable tensor, in a fixed order."""
        for layer in self.layers:
            for name in layer.param_names:
                yield layer.index, name, layer.params[name]

    def gradients(self):
        for layer in self.layers:
            for name in layer.param_names:
                yield layer.index, name, layer.grads.get(name)

    @property
    def n_params(self) -> int:
        return int(sum(a.size for _, _, a in self.parameters()))

    def touch(self):
        self.version += 1

    def zero_weights(self):
        for _, _, a in self.parameters():
            a[...] = 0
        self.touch()

    def astype(self, dtype) -> "Model":
        other = self.copy()
        other.dtype = np.dtype(dtype)
        for layer in other.layers:
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(other.dtype)
            layer.grads = {}
        return other

    def copy(self) -> "Model":
        other = Model.__new__(Model)
        other.__dict__.update(self.__dict__)
        other.layers = []
        for layer in self.layers:
            clone = type(layer).__new__(type(layer))
            clone.__dict__.update(layer.__dict__)
            clone.params = {k: v.copy() for k, v in layer.params.items()}
            clone.grads = {}
            other.layers.append(clone)
        other.version = 0
        return other

    def shadow(self) -> "Model":
        """Clone sharing parameter arrays but with its own gradients and caches."""
        other = Model.__new__(Model)
        other.__dict__.update(self.__dict__)
        other.layers = []
        for layer in self.layers:
            clone = type(layer).__new__(type(layer))
            clone.__dict__.update(layer.__dict__)
            clone.grads = {}
            other.layers.append(clone)
        other.version = 0
        return other

    def shape_trace(self) -> list[tuple]:
        """Output shape after each layer, computed statically."""
        return [layer.out_shape for layer in self.layers]

    def count(self, kind: str) -> int:
        return sum(1 for s in self.specs if s.kind == kind)

    # passes

    def _as_batch(self, x):
        x = np.asarray(x)
        batched = x.ndim == len(self.input_shape) + 1
        if not batched:
            if x.ndim == len(self.input_shape) - 1 and self.input_shape[0] == 1:
                x = x[None]  # bare (H, W) grayscale image
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatchError(0, f"input shape {x.shape[1:]} does not match model input {self.input_shape}")
        return x.astype(self.dtype, copy=False), batched

    def forward(self, x, mode: str = "infer", rng: Optional[np.random.Generator] = None):
        """Return ``(q, logits, cache)``; leading batch axis kept iff given."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        train = mode == "train"
        h, batched = self._as_batch(x)
        caches = []
        for layer in self.layers[:-1]:
            if h.shape[1:] != layer.in_shape:
                layer.fail(f"got input {h.shape[1:]}, expected {layer.in_shape}")
            h, c = layer.forward(h, train, rng)
            caches.append(c)
        caches.append(None)
        logits = h
        q = softmax(logits.astype(np.float64)).astype(self.dtype)
        cache = ForwardCache(id(self), self.version, train, batched, caches)
        if not batched:
            return q[0], logits[0], cache
        return q, logits, cache

    def backward(self, cache: Optional[ForwardCache], grad_logits) -> list[dict]:
        if cache is None:
            raise StaleCacheError("backward needs the cache from a forward call")
        if cache.model_id != id(self) or cache.version != self.version:
            raise StaleCacheError("forward cache is stale (parameters changed since it was made)")
        g = np.asarray(grad_logits, dtype=self.dtype)
        if not cache.batched:
            g = g[None]
        if g.shape[1:] != (self.K,):
            raise ShapeMismatchError(len(self.layers) - 1, f"gradient shape {g.shape[1:]} != ({self.K},)")
        for layer, c in zip(reversed(self.layers[:-1]), reversed(cache.layer_caches[:-1])):
            g = layer.backward(g, c)
        return [dict(layer.grads) for layer in self.layers]

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        out = [self.forward(x[i:i + batch_size], "infer")[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def describe(self) -> str:
        return " -> ".join(str(s) for s in self.specs)


# -- builders --------------------------------------------------------------

VGG13_BLOCKS = ((64, 2), (128, 2), (256, 3), (256, 3))


def _block_specs(blocks, conv_dropout):
    specs = []
    for width, n_conv in blocks:
        for _ in range(n_conv):
            specs += [conv(width), RELU]
        specs += [MAXPOOL, dropout(conv_dropout)]
    return specs


def _head_specs(hidden, K, dense_dropout):
    specs = []
    for units in hidden:
        specs += [dense(units), RELU, dropout(dense_dropout)]
    return specs + [dense(K), SOFTMAX]


def build_vgg13(input_size: int = 64, K: int = 8, seed: int = 0, dtype=np.float64) -> Model:
    """Ten 3x3 conv layers in four pooled blocks, then 1024-1024-K dense."""
    specs = _block_specs(VGG13_BLOCKS, 0.25) + _head_specs((1024, 1024), K, 0.5)
    return Model(specs, (1, input_size, input_size), seed=seed, dtype=dtype, name="vgg13")


def build_toy(input_size: int = 16, K: int = 8, blocks: int = 2, width: int = 8,
              convs_per_block: int = 1, hidden: int = 32, conv_dropout: float = 0.25,
              dense_dropout: float = 0.5, seed: int = 0, dtype=np.float64) -> Model:
    """Reduced network with the same layer grammar, for desk-scale runs."""
    if blocks < 1:
        raise ValueError("blocks must be >= 1")
    if input_size % (2 ** blocks):
        raise ValueError(f"input size {input_size} cannot be halved {blocks} times")
    widths = tuple((width * 2 ** b, convs_per_block) for b in range(blocks))
    hidden_layers = (hidden,) if hidden else ()
    specs = _block_specs(widths, conv_dropout) + _head_specs(hidden_layers, K, dense_dropout)
    return Model(specs, (1, input_size, input_size), seed=seed, dtype=dtype, name="toy")


# -- gradient check --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: Optional[tuple]  # (layer index, param name, flat index)
    n_checked: int
    n_kinks: int
    eps: float
    loss: float

    def passed(self, tol: float = 1e-5) -> bool:
        return self.n_checked > 0 and self.max_rel_error < tol

    def as_dict(self):
        return dataclasses.asdict(self)


REL_ERR_FLOOR = 1e-6


def relative_error(a, b, floor: float = REL_ERR_FLOOR):
    """|a-b| / max(|a|, |b|, floor); the floor keeps near-zero entries from blowing up."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _loss_and_pattern(model, x, p, scheme, drawn):
    q, _, cache = model.forward(x, "infer")
    targets = batch_targets(scheme, p, q, drawn)
    loss = float(np.mean(batch_loss(targets, q)))
    pats = cache.patterns(model) + [targets.argmax(axis=1)]
    return loss, pats, q, targets, cache


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def gradient_check(model: Model, x, dist, scheme: SchemeKind, drawn=None, *,
                   eps: float = 1e-5, mode: str = "infer", max_coords: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare end-to-end parameter gradients against central differences.

    Coordinates whose +/-eps perturbation flips a ReLU, a pool argmax or an
    ML choice sit on a non-differentiable point; they are counted as kinks
    and left out of the error. With ``max_coords`` a random subset of each
    parameter tensor is checked.
    """
    if mode == "train" and any(s.kind == "dropout" and s.rate > 0 for s in model.specs):
        raise GradientCheckRefused("dropout is active; the loss is stochastic")
    m = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == len(m.input_shape) or (x.ndim == 2 and m.input_shape[0] == 1):
        x = m._as_batch(x)[0]
    p = np.atleast_2d(np.asarray(getattr(dist, "p", dist), dtype=np.float64))
    if drawn is not None:
        drawn = np.atleast_1d(np.asarray(getattr(drawn, "index", drawn)))

    loss0, pat0, q, targets, cache = _loss_and_pattern(m, x, p, scheme, drawn)
    m.backward(cache, (q - targets) / x.shape[0])
    analytic = {(i, n): g.copy() for i, n, g in m.gradients()}

    # central-difference roundoff grows with |loss|, so the floor does too
    floor = REL_ERR_FLOOR * max(1.0, abs(loss0))
    worst, max_err, n_checked, n_kinks = None, 0.0, 0, 0
    for i, name, arr in list(m.parameters()):
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        ga = analytic[(i, name)].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            m.touch()
            lp, patp, *_ = _loss_and_pattern(m, x, p, scheme, drawn)
            flat[c] = orig - eps
            m.touch()
            lm, patm, *_ = _loss_and_pattern(m, x, p, scheme, drawn)
            flat[c] = orig
            m.touch()
            if not (_same_pattern(pat0, patp) and _same_pattern(pat0, patm)):
                n_kinks += 1
                continue
            numeric = (lp - lm) / (2 * eps)
            err = float(relative_error(ga[c], numeric, floor))
            n_checked += 1
            if err > max_err or worst is None:
                max_err, worst = max(err, max_err), (i, name, int(c))
    return GradCheckReport(max_err, worst, n_checked, n_kinks, eps, loss0)
