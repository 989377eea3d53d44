"""Attack-target models: MLP, two plain CNNs and a small residual net.

Parameters live in an immutable :class:`ParamSet`; the forward pass is a pure
function of (params, spec, input) so the same code serves plain training,
first-order client gradients and the attacker's second-order objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError

ARCHS = ("mlp", "cnn4", "cnn7", "tinyres")
ACTIVATIONS = ("sigmoid", "relu")
# fan_in: U(+-sqrt(1/fan_in)) weights, zero biases.
# uniform: U(-0.5, 0.5) for weights and biases, the usual gradient-leakage target.
INITS = ("fan_in", "uniform")

# layer widths; see the per-arch builders below
CNN4_CHANNELS = (12, 12, 12, 12)
CNN4_POOL_AFTER = (2, 4)
CNN7_CHANNELS = (16, 16, 32, 32, 64, 64, 64)
CNN7_POOL_AFTER = (2, 4, 6)
TINYRES_STEM = 16
TINYRES_BLOCKS = (16, 32, 64)
MLP_HIDDEN = 256


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "cnn4"
    input_dims: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 2
    activation: str = "sigmoid"
    init: str = "fan_in"

    def __post_init__(self):
        if self.init not in INITS:
            raise ValueError(f"unknown init scheme {self.init!r}; expected one of {INITS}")
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        dims = tuple(int(d) for d in self.input_dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ShapeError(f"input_dims must be three positive extents, got {list(self.input_dims)}")
        object.__setattr__(self, "input_dims", dims)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


@dataclass(frozen=True)
class ParamSet:
    """Ordered, named model parameters (the global model at some round)."""

    entries: tuple[tuple[str, np.ndarray], ...]
    step_count: int = 0

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    @property
    def tensors(self) -> list[np.ndarray]:
        return [t for _, t in self.entries]

    def __getitem__(self, name: str) -> np.ndarray:
        for n, t in self.entries:
            if n == name:
                return t
        raise KeyError(name)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def num_parameters(self) -> int:
        return int(sum(t.size for _, t in self.entries))

    def with_tensors(self, tensors: Sequence[np.ndarray], steps: int = 0) -> "ParamSet":
        return ParamSet(tuple(zip(self.names, tensors)), self.step_count + steps)

    def equals(self, other: "ParamSet") -> bool:
        return self.names == other.names and all(
            a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(self.tensors, other.tensors))


@dataclass(frozen=True)
class GradientUpdate:
    """A client's shared update: one gradient tensor per parameter."""

    entries: tuple[tuple[str, np.ndarray], ...]
    batch_size: int = 1

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    @property
    def tensors(self) -> list[np.ndarray]:
        return [t for _, t in self.entries]

    def __getitem__(self, name: str) -> np.ndarray:
        for n, t in self.entries:
            if n == name:
                return t
        raise KeyError(name)

    def __len__(self):
        return len(self.entries)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.reshape(-1) for t in self.tensors])

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "GradientUpdate":
        return replace(self, entries=tuple(zip(self.names, tensors)))

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(t.astype(np.float64) ** 2) for t in self.tensors)))


# ---------------------------------------------------------------- layout


@dataclass(frozen=True)
class _Param:
    name: str
    shape: tuple[int, ...]
    fan_in: int
    is_bias: bool = False


def _conv(name, cin, cout, k=3):
    return [_Param(f"{name}.w", (cout, cin, k, k), cin * k * k),
            _Param(f"{name}.b", (cout,), cin * k * k, True)]


def _fc(name, fin, fout):
    return [_Param(f"{name}.w", (fin, fout), fin), _Param(f"{name}.b", (fout,), fin, True)]


def _plain_cnn_layout(spec, channels, pool_after):
    c, h, w = spec.input_dims
    layout = []
    for i, cout in enumerate(channels, start=1):
        layout += _conv(f"conv{i}", c, cout)
        c = cout
        if i in pool_after:
            h, w = h // 2, w // 2
            if h == 0 or w == 0:
                raise ShapeError(f"input dims {list(spec.input_dims)} too small for {spec.arch}")
    layout += _fc("fc", c * h * w, spec.num_classes)
    return layout


def param_layout(spec: ModelSpec) -> list[_Param]:
    if spec.arch == "mlp":
        c, h, w = spec.input_dims
        return _fc("fc1", c * h * w, MLP_HIDDEN) + _fc("fc2", MLP_HIDDEN, spec.num_classes)
    if spec.arch == "cnn4":
        return _plain_cnn_layout(spec, CNN4_CHANNELS, CNN4_POOL_AFTER)
    if spec.arch == "cnn7":
        return _plain_cnn_layout(spec, CNN7_CHANNELS, CNN7_POOL_AFTER)
    c = spec.input_dims[0]
    layout = _conv("stem", c, TINYRES_STEM)
    cin = TINYRES_STEM
    for i, cout in enumerate(TINYRES_BLOCKS, start=1):
        layout += _conv(f"block{i}.conv1", cin, cout) + _conv(f"block{i}.conv2", cout, cout)
        cin = cout
    return layout + _fc("fc", cin, spec.num_classes)


def build_model(spec: ModelSpec, seed: int) -> ParamSet:
    """Deterministic parameters for ``spec`` from ``seed``.

    The default ``fan_in`` scheme draws weights from U(-sqrt(1/fan_in),
    sqrt(1/fan_in)) with zero biases; ``uniform`` draws every entry from
    U(-0.5, 0.5).
    """
    rng = np.random.Generator(np.random.Philox(seed))
    dtype = ad.working_dtype()
    entries = []
    for p in param_layout(spec):
        if spec.init == "uniform":
            t = rng.uniform(-0.5, 0.5, size=p.shape).astype(dtype)
        elif p.is_bias:
            t = np.zeros(p.shape, dtype=dtype)
        else:
            bound = math.sqrt(1.0 / p.fan_in)
            t = rng.uniform(-bound, bound, size=p.shape).astype(dtype)
        entries.append((p.name, t))
    return ParamSet(tuple(entries))


def zeros_like(params: ParamSet) -> ParamSet:
    return params.with_tensors([np.zeros_like(t) for t in params.tensors])


# ---------------------------------------------------------------- forward


def _act(spec: ModelSpec, x: Node) -> Node:
    return ad.sigmoid(x) if spec.activation == "sigmoid" else ad.relu(x)


def _dense(x: Node, w: Node, b: Node) -> Node:
    row = ad.matmul(ad.reshape(x, (1, x.size)), w)
    return ad.add(ad.reshape(row, (w.shape[1],)), b)


def _plain_cnn(p, spec, x, channels, pool_after):
    for i in range(1, len(channels) + 1):
        x = _act(spec, ad.conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], 1, 1))
        if i in pool_after:
            x = ad.avg_pool2d(x, 2)
    return _dense(x, p["fc.w"], p["fc.b"])


def _shortcut(x: Node, cout: int) -> Node:
    """Stride-2 subsampling, zero-padded up to ``cout`` channels."""
    c, h, w = x.shape
    x = ad.take(x, (slice(None), slice(None, None, 2), slice(None, None, 2)))
    if cout != c:
        x = ad.put(x, (slice(0, c),), (cout,) + x.shape[1:])
    return x


def _tinyres(p, spec, x):
    x = _act(spec, ad.conv2d(x, p["stem.w"], p["stem.b"], 1, 1))
    for i, cout in enumerate(TINYRES_BLOCKS, start=1):
        h = _act(spec, ad.conv2d(x, p[f"block{i}.conv1.w"], p[f"block{i}.conv1.b"], 2, 1))
        h = ad.conv2d(h, p[f"block{i}.conv2.w"], p[f"block{i}.conv2.b"], 1, 1)
        x = _act(spec, ad.add(h, _shortcut(x, cout)))
    c, hh, ww = x.shape
    pooled = ad.scale(ad.reshape(ad.sum_to(x, (c, 1, 1)), (c,)), 1.0 / (hh * ww))
    return _dense(pooled, p["fc.w"], p["fc.b"])


def logits(weights: Mapping[str, Node], spec: ModelSpec, x) -> Node:
    """Tape-recorded logits for one C x H x W input."""
    x = ad._node(x)
    if x.shape != spec.input_dims:
        raise ShapeError(f"input dims {list(x.shape)} do not match model input dims "
                         f"{list(spec.input_dims)}")
    if spec.arch == "mlp":
        h = _act(spec, _dense(x, weights["fc1.w"], weights["fc1.b"]))
        return _dense(h, weights["fc2.w"], weights["fc2.b"])
    if spec.arch == "cnn4":
        return _plain_cnn(weights, spec, x, CNN4_CHANNELS, CNN4_POOL_AFTER)
    if spec.arch == "cnn7":
        return _plain_cnn(weights, spec, x, CNN7_CHANNELS, CNN7_POOL_AFTER)
    return _tinyres(weights, spec, x)


def _constants(params: ParamSet) -> dict[str, Node]:
    return {n: ad.constant(t) for n, t in params}


def forward(params: ParamSet, spec: ModelSpec, x) -> np.ndarray:
    with ad.no_grad():
        return logits(_constants(params), spec, x).value


def predict(params: ParamSet, spec: ModelSpec, x) -> int:
    return int(np.argmax(forward(params, spec, x)))


# ---------------------------------------------------------------- losses and gradients


def one_hot(label: int, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes, dtype=ad.working_dtype())
    y[int(label)] = 1.0
    return y


def as_target(y, num_classes: int) -> np.ndarray:
    if np.ndim(y) == 0:
        return one_hot(int(y), num_classes)
    return np.asarray(y, dtype=ad.working_dtype())


def batch_loss(weights: Mapping[str, Node], spec: ModelSpec, xs: Sequence, ys: Sequence) -> Node:
    """Mean softmax cross-entropy over a batch of (image, probability vector)."""
    if len(xs) == 0 or len(xs) != len(ys):
        raise ValueError("batch must be nonempty with one target per image")
    total = None
    for x, y in zip(xs, ys):
        term = ad.softmax_cross_entropy(logits(weights, spec, x), y)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(xs)) if len(xs) > 1 else total


def parameter_gradients(weights: Sequence[Node], names: Sequence[str], spec: ModelSpec,
                        x, y, differentiable: bool = False) -> list:
    """dL/dtheta for one example, optionally keeping the graph for a second pass."""
    loss = ad.softmax_cross_entropy(logits(dict(zip(names, weights)), spec, x), y)
    return ad.grad(loss, weights, differentiable=differentiable)


def _split_batch(x, y, num_classes):
    x = np.asarray(x)
    if x.ndim == 3:
        return [x], [as_target(y, num_classes)]
    if np.ndim(y) == 0 or len(y) != len(x):
        raise ShapeError("batched inputs need one label per image")
    return list(x), [as_target(v, num_classes) for v in y]


def loss_and_grad(params: ParamSet, spec: ModelSpec, x, y) -> tuple[float, GradientUpdate]:
    """Mean cross-entropy and its gradient for one image or an N x C x H x W batch.

    ``y`` is a class index, a probability vector, or one of those per image.
    """
    xs, ys = _split_batch(x, y, spec.num_classes)
    leaves = [ad.variable(t) for t in params.tensors]
    loss = batch_loss(dict(zip(params.names, leaves)), spec, xs, ys)
    grads = ad.grad(loss, leaves)
    return float(loss.value), GradientUpdate(tuple(zip(params.names, grads)), len(xs))


def grad_of_grad_check(x0, g0: Sequence, params: ParamSet, spec: ModelSpec, y) -> np.ndarray:
    """Gradient in x of D(x) = ||dL(x, y)/dtheta - g0||^2, through the recorded backward pass."""
    if len(g0) != len(params):
        raise ShapeError(f"g0 has {len(g0)} tensors, model has {len(params)} parameters")
    for (name, p), g in zip(params, g0):
        if np.shape(g) != p.shape:
            raise ShapeError(f"{name}: g0 dims {list(np.shape(g))} vs parameter dims {list(p.shape)}")
    x = ad.variable(x0)
    weights = [ad.variable(t) for t in params.tensors]
    grads = parameter_gradients(weights, params.names, spec, x, as_target(y, spec.num_classes),
                                differentiable=True)
    total = None
    for g, t in zip(grads, g0):
        term = ad.sum_squares(ad.sub(g, ad.constant(t)))
        total = term if total is None else ad.add(total, term)
    return ad.grad(total, [x])[0]


def dataset_loss(params: ParamSet, spec: ModelSpec, dataset) -> float:
    with ad.no_grad():
        w = _constants(params)
        return float(np.mean([
            ad.softmax_cross_entropy(logits(w, spec, x), as_target(y, spec.num_classes)).value
            for x, y in dataset]))


def accuracy(params: ParamSet, spec: ModelSpec, dataset) -> float:
    return float(np.mean([predict(params, spec, x) == int(y) for x, y in dataset]))


def train_local(params: ParamSet, spec: ModelSpec, dataset, epochs: int, lr: float,
                seed: int) -> ParamSet:
    """Per-example SGD over a freshly shuffled dataset each epoch."""
    if epochs < 0 or lr <= 0:
        raise ValueError("need epochs >= 0 and lr > 0")
    if epochs == 0:
        return params
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    from .optim import sgd_step

    rng = np.random.Generator(np.random.Philox(seed))
    for _ in range(epochs):
        for idx in rng.permutation(len(dataset)):
            x, y = dataset[idx]
            _, g = loss_and_grad(params, spec, x, y)
            params = sgd_step(params, g, lr)
    return params
