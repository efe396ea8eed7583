"""Small deterministic numpy network core: layers, parameters, losses and SGD.

Activations and weights are float32 by default; every reduction (matrix
products, pooling means, loss means, norms) accumulates in float64 and is cast
back to the parameter dtype once per layer.  Passing float64 parameters runs
the whole network in float64, which is what the gradient checks use.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

import numpy as np

from ._seeding import derive_seed

ACC = np.float64
PARAMETRIC = ("conv2d", "dense")
LAYER_KINDS = ("conv2d", "dense", "relu", "avgpool", "flatten")


class ShapeMismatchError(ValueError):
    """Raised when tensors or parameter sets do not line up with a network."""

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


@dataclass(frozen=True)
class Layer:
    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None
    stride: int = 1
    in_dim: int | None = None
    out_dim: int | None = None
    pool: int = 2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC

    def to_dict(self) -> dict:
        keys = {
            "conv2d": ("in_channels", "out_channels", "kernel_size", "stride"),
            "dense": ("in_dim", "out_dim"),
            "avgpool": ("pool",),
        }.get(self.kind, ())
        d = {"kind": self.kind}
        d.update({k: getattr(self, k) for k in keys})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Layer":
        return cls(**d)


def conv2d(in_channels, out_channels, kernel_size, stride=1) -> Layer:
    return Layer("conv2d", in_channels=in_channels, out_channels=out_channels,
                 kernel_size=kernel_size, stride=stride)


def dense(in_dim, out_dim) -> Layer:
    return Layer("dense", in_dim=in_dim, out_dim=out_dim)


def relu() -> Layer:
    return Layer("relu")


def avgpool(pool=2) -> Layer:
    return Layer("avgpool", pool=pool)


def flatten() -> Layer:
    return Layer("flatten")


def _layer_output_shape(layer: Layer, shape: tuple, index: int) -> tuple:
    if layer.kind == "conv2d":
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeMismatchError(
                f"conv2d expects ({layer.in_channels}, H, W) input, got {shape}", index)
        k, s = layer.kernel_size, layer.stride
        if k < 1 or s < 1 or shape[1] < k or shape[2] < k:
            raise ShapeMismatchError(f"kernel {k} does not fit input {shape}", index)
        return (layer.out_channels, (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
    if layer.kind == "dense":
        if len(shape) != 1 or shape[0] != layer.in_dim:
            raise ShapeMismatchError(
                f"dense expects ({layer.in_dim},) input, got {shape}", index)
        return (layer.out_dim,)
    if layer.kind == "avgpool":
        if len(shape) != 3 or shape[1] < layer.pool or shape[2] < layer.pool:
            raise ShapeMismatchError(f"avgpool({layer.pool}) cannot pool {shape}", index)
        return (shape[0], shape[1] // layer.pool, shape[2] // layer.pool)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: input shape (C, H, W) or (D,), ordered layers, class count."""

    input_shape: tuple
    layers: tuple
    num_classes: int
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shapes.append(_layer_output_shape(layer, shapes[-1], i))
        if not any(layer.parametric for layer in self.layers):
            raise ShapeMismatchError("network has no parametric layer")
        if shapes[-1] != (self.num_classes,):
            raise ShapeMismatchError(
                f"final output shape {shapes[-1]} != ({self.num_classes},)", len(self.layers) - 1)
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def parametric_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.parametric]

    def param_shapes(self) -> list[tuple[int, str, tuple]]:
        out = []
        for i in self.parametric_indices:
            layer = self.layers[i]
            if layer.kind == "conv2d":
                w = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
                b = (layer.out_channels,)
            else:
                w, b = (layer.out_dim, layer.in_dim), (layer.out_dim,)
            out += [(i, "weight", w), (i, "bias", b)]
        return out

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "num_classes": self.num_classes,
        }

    def to_json(self) -> str:
        """Canonical JSON (sorted keys, no whitespace)."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(Layer.from_dict(x) for x in d["layers"]),
                   int(d["num_classes"]))


def small_cnn(input_shape=(1, 16, 16), num_classes=10, conv_channels=8, hidden=32,
              kernel_size=3, pool=2) -> NetworkSpec:
    """conv -> relu -> avgpool -> flatten -> dense -> relu -> dense."""
    c, h, w = input_shape
    ho, wo = (h - kernel_size + 1) // pool, (w - kernel_size + 1) // pool
    return NetworkSpec(input_shape, (
        conv2d(c, conv_channels, kernel_size), relu(), avgpool(pool), flatten(),
        dense(conv_channels * ho * wo, hidden), relu(), dense(hidden, num_classes),
    ), num_classes)


class ParamSet:
    """Ordered ``(layer_index, role, array)`` entries; read-only arrays.

    Supports elementwise ``+``/``-`` with a congruent ParamSet and scalar
    ``*``.  Gradients use the same type.
    """

    __slots__ = ("entries",)

    def __init__(self, entries: Iterable[tuple[int, str, np.ndarray]]):
        frozen = []
        for layer_index, role, arr in entries:
            arr = np.array(arr, copy=True)
            arr.flags.writeable = False
            frozen.append((int(layer_index), role, arr))
        self.entries = tuple(frozen)

    def __iter__(self) -> Iterator[tuple[int, str, np.ndarray]]:
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __repr__(self):
        shapes = ", ".join(f"{i}.{r}{tuple(a.shape)}" for i, r, a in self.entries)
        return f"ParamSet({shapes})"

    def get(self, layer_index: int, role: str) -> np.ndarray:
        for i, r, a in self.entries:
            if i == layer_index and r == role:
                return a
        raise KeyError((layer_index, role))

    @property
    def dtype(self):
        return self.entries[0][2].dtype

    @property
    def size(self) -> int:
        return sum(a.size for _, _, a in self.entries)

    def check_congruent(self, other: "ParamSet"):
        if len(self.entries) != len(other.entries):
            raise ShapeMismatchError(
                f"parameter sets have {len(self.entries)} and {len(other.entries)} entries")
        for (i, r, a), (j, q, b) in zip(self.entries, other.entries):
            if (i, r) != (j, q) or a.shape != b.shape:
                raise ShapeMismatchError(f"{r} {a.shape} vs layer {j} {q} {b.shape}", i)

    def check_spec(self, spec: NetworkSpec):
        expected = spec.param_shapes()
        if len(expected) != len(self.entries):
            raise ShapeMismatchError(
                f"spec expects {len(expected)} parameter entries, got {len(self.entries)}")
        for (i, r, shape), (j, q, a) in zip(expected, self.entries):
            if (i, r) != (j, q) or tuple(a.shape) != shape:
                raise ShapeMismatchError(f"expected {r} {shape}, got {q} {tuple(a.shape)}", i)

    def map(self, fn) -> "ParamSet":
        return ParamSet((i, r, fn(a)) for i, r, a in self.entries)

    def zip_with(self, other: "ParamSet", fn) -> "ParamSet":
        self.check_congruent(other)
        return ParamSet((i, r, fn(a, b)) for (i, r, a), (_, _, b) in zip(self.entries, other.entries))

    def __add__(self, other):
        return self.zip_with(other, lambda a, b: (a + b).astype(a.dtype))

    def __sub__(self, other):
        return self.zip_with(other, lambda a, b: (a - b).astype(a.dtype))

    def __mul__(self, scalar):
        return self.map(lambda a: (a * scalar).astype(a.dtype))

    __rmul__ = __mul__

    def astype(self, dtype) -> "ParamSet":
        return self.map(lambda a: a.astype(dtype))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel().astype(ACC) for _, _, a in self.entries])

    def with_entries(self, updates: dict) -> "ParamSet":
        """Copy with ``{(layer_index, role): array}`` replaced."""
        return ParamSet((i, r, updates.get((i, r), a)) for i, r, a in self.entries)

    def equals(self, other: "ParamSet") -> bool:
        """Bit-exact equality (shape, dtype and values)."""
        if len(self.entries) != len(other.entries):
            return False
        return all((i, r) == (j, q) and a.dtype == b.dtype and a.shape == b.shape
                   and np.array_equal(a, b)
                   for (i, r, a), (j, q, b) in zip(self.entries, other.entries))


def init_params(spec: NetworkSpec, seed: int, dtype=np.float32) -> ParamSet:
    """Uniform in +-sqrt(1/fan_in) for weights and biases of every layer."""
    entries = []
    for i, role, shape in spec.param_shapes():
        layer = spec.layers[i]
        fan_in = (layer.in_channels * layer.kernel_size ** 2 if layer.kind == "conv2d"
                  else layer.in_dim)
        bound = math.sqrt(1.0 / fan_in)
        rng = np.random.default_rng(derive_seed(seed, "init", i, role))
        entries.append((i, role, rng.uniform(-bound, bound, size=shape).astype(dtype)))
    return ParamSet(entries)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    local_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=int(seed))


# --- layer kernels -----------------------------------------------------------

def _conv_windows(x, k, s):
    # (N, C, H, W) -> (N, Ho, Wo, C*k*k)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k), (n, ho, wo)


def _conv_forward(x, w, b, stride, dtype):
    cols, (n, ho, wo) = _conv_windows(x, w.shape[2], stride)
    out = cols.astype(ACC) @ w.reshape(w.shape[0], -1).T.astype(ACC) + b.astype(ACC)
    return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2).astype(dtype), cols


def _conv_backward(dout, x, cols, w, stride, dtype):
    n, o, ho, wo = dout.shape
    k = w.shape[2]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o).astype(ACC)
    dw = (d2.T @ cols.astype(ACC)).reshape(w.shape).astype(dtype)
    db = d2.sum(axis=0).astype(dtype)
    dcols = (d2 @ w.reshape(o, -1).astype(ACC)).reshape(n, ho, wo, x.shape[1], k, k)
    dx = np.zeros(x.shape, dtype=ACC)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx.astype(dtype), dw, db


def _pool_forward(x, p, dtype):
    n, c, h, w = x.shape
    ho, wo = h // p, w // p
    v = x[:, :, :ho * p, :wo * p].astype(ACC).reshape(n, c, ho, p, wo, p)
    return v.mean(axis=(3, 5)).astype(dtype)


def _pool_backward(dout, x_shape, p, dtype):
    n, c, h, w = x_shape
    ho, wo = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape, dtype=dtype)
    g = (dout.astype(ACC) / (p * p)).astype(dtype)
    dx[:, :, :ho * p, :wo * p] = np.repeat(np.repeat(g, p, axis=2), p, axis=3)
    return dx


def _check_batch(spec: NetworkSpec, batch) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != len(spec.input_shape) + 1 or batch.shape[1:] != spec.input_shape:
        raise ShapeMismatchError(
            f"input batch shape {batch.shape[1:]} != network input {spec.input_shape}", 0)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    return batch


def _forward_cached(spec: NetworkSpec, params: ParamSet, batch):
    params.check_spec(spec)
    dtype = params.dtype
    x = _check_batch(spec, batch).astype(dtype, copy=False)
    acts, caches = [x], []
    for i, layer in enumerate(spec.layers):
        cache = None
        if layer.kind == "conv2d":
            x, cache = _conv_forward(x, params.get(i, "weight"), params.get(i, "bias"),
                                     layer.stride, dtype)
        elif layer.kind == "dense":
            w, b = params.get(i, "weight"), params.get(i, "bias")
            x = (x.astype(ACC) @ w.T.astype(ACC) + b.astype(ACC)).astype(dtype)
        elif layer.kind == "relu":
            x = np.maximum(x, dtype.type(0))
        elif layer.kind == "avgpool":
            x = _pool_forward(x, layer.pool, dtype)
        elif layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        acts.append(x)
        caches.append(cache)
    return acts, caches


def activations(spec: NetworkSpec, params: ParamSet, batch) -> list[np.ndarray]:
    """Outputs of every layer (index 0 is the input itself)."""
    return _forward_cached(spec, params, batch)[0]


def forward(spec: NetworkSpec, params: ParamSet, batch) -> np.ndarray:
    """Logits ``[batch, num_classes]``."""
    return _forward_cached(spec, params, batch)[0][-1]


def _backward(spec, params, acts, caches, dout) -> ParamSet:
    dtype = params.dtype
    grads = {}
    d = dout.astype(dtype)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, x_in = spec.layers[i], acts[i]
        if layer.kind == "conv2d":
            w = params.get(i, "weight")
            d, dw, db = _conv_backward(d, x_in, caches[i], w, layer.stride, dtype)
            grads[(i, "weight")], grads[(i, "bias")] = dw, db
        elif layer.kind == "dense":
            w = params.get(i, "weight")
            d64 = d.astype(ACC)
            grads[(i, "weight")] = (d64.T @ x_in.astype(ACC)).astype(dtype)
            grads[(i, "bias")] = d64.sum(axis=0).astype(dtype)
            d = (d64 @ w.astype(ACC)).astype(dtype)
        elif layer.kind == "relu":
            d = np.where(x_in > 0, d, dtype.type(0))
        elif layer.kind == "avgpool":
            d = _pool_backward(d, x_in.shape, layer.pool, dtype)
        elif layer.kind == "flatten":
            d = d.reshape(x_in.shape)
    return ParamSet((i, r, grads[(i, r)]) for i, r, _ in params)


def loss_and_gradients(spec: NetworkSpec, params: ParamSet, batch, labels):
    """Mean softmax cross-entropy and its gradients."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or len(labels) == 0:
        raise ValueError("labels must be a nonempty 1-D array")
    if len(labels) != len(batch):
        raise ShapeMismatchError(f"{len(batch)} samples but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    acts, caches = _forward_cached(spec, params, batch)
    z = acts[-1].astype(ACC)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = len(labels)
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))
    probs = np.exp(z - lse[:, None])
    probs[rows, labels] -= 1.0
    return loss, _backward(spec, params, acts, caches, probs / n)


def regression_loss_and_gradients(spec: NetworkSpec, params: ParamSet, batch, targets,
                                  sample_weight=None):
    """Mean of ``weight * (output - target)**2`` for a single-output network."""
    if spec.shapes[-1] != (1,):
        raise ShapeMismatchError(
            f"regression needs a scalar output, network emits {spec.shapes[-1]}",
            len(spec.layers) - 1)
    targets = np.asarray(targets, dtype=ACC).reshape(-1)
    if len(targets) != len(batch):
        raise ShapeMismatchError(f"{len(batch)} samples but {len(targets)} targets")
    w = np.ones_like(targets) if sample_weight is None else np.asarray(sample_weight, dtype=ACC)
    acts, caches = _forward_cached(spec, params, batch)
    err = acts[-1][:, 0].astype(ACC) - targets
    n = len(targets)
    loss = float(np.sum(w * err * err) / n)
    dout = (2.0 * w * err / n)[:, None]
    return loss, _backward(spec, params, acts, caches, dout)


def sgd_step(params: ParamSet, grads: ParamSet, learning_rate: float) -> ParamSet:
    """``params - learning_rate * grads``."""
    if learning_rate < 0:
        raise ValueError("learning_rate must be >= 0")
    return params.zip_with(
        grads, lambda p, g: (p.astype(ACC) - learning_rate * g.astype(ACC)).astype(p.dtype))


def train_local(spec: NetworkSpec, params: ParamSet, data, cfg: TrainConfig) -> ParamSet:
    """Mini-batch SGD for ``cfg.local_epochs`` passes over ``data``.

    ``data`` is anything with ``images`` and ``labels`` arrays (a
    LabeledDataset or ClientShard).  Shuffling is drawn from ``cfg.seed``.
    """
    images, labels = np.asarray(data.images), np.asarray(data.labels)
    n = len(labels)
    if n == 0:
        raise ValueError("cannot train on an empty shard")
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = loss_and_gradients(spec, params, images[idx], labels[idx])
            params = sgd_step(params, grads, cfg.learning_rate)
    return params


def param_distance(a: ParamSet, b: ParamSet) -> float:
    """Global L2 norm of ``a - b`` over every entry."""
    a.check_congruent(b)
    total = 0.0
    for (_, _, x), (_, _, y) in zip(a, b):
        d = x.astype(ACC) - y.astype(ACC)
        total += float(np.dot(d.ravel(), d.ravel()))
    return math.sqrt(total)


def predict(spec: NetworkSpec, params: ParamSet, images, batch_size=500) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest index."""
    images = np.asarray(images)
    out = [np.argmax(forward(spec, params, images[s:s + batch_size]), axis=1)
           for s in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

