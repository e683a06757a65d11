"""Layered softmax models with hand-written gradients.

Two architectures are supported: multinomial logistic regression and a small
multi-layer perceptron. Both end in a softmax head trained with mean
cross-entropy. Parameters are kept as a list of flat blocks, one per weight
matrix and one per bias vector, in forward order::

    [W1, b1, W2, b2, ..., W_out, b_out]

Weight blocks are stored row-major with shape ``(out, in)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import CapacityError, EmptyInputError, ShapeError

DEFAULT_HESSIAN_CAP = 5000


class LabeledSample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "logreg"
    input_dim: int = 2
    classes: int = 2
    hidden: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("logreg", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "logreg" and self.hidden:
            raise ValueError("logistic regression has no hidden layers")
        if self.input_dim < 1 or self.classes < 2:
            raise ValueError("need input_dim >= 1 and classes >= 2")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.classes)

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        """(rows, cols) of every parameter block; biases are ``(out, 1)``."""
        sizes = self.layer_sizes
        out = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            out.append((fan_out, fan_in))
            out.append((fan_out, 1))
        return tuple(out)

    @property
    def num_blocks(self) -> int:
        return 2 * (len(self.hidden) + 1)

    @property
    def block_names(self) -> tuple[str, ...]:
        names = []
        for i in range(len(self.hidden) + 1):
            names += [f"W{i + 1}", f"b{i + 1}"]
        return tuple(names)

    def init_params(self, seed: int, scale: float = 0.01) -> "LayeredParams":
        rng = np.random.default_rng(seed)
        blocks = [scale * rng.standard_normal(r * c) for r, c in self.shapes]
        return LayeredParams(blocks, self.shapes)

    def zeros(self) -> "LayeredParams":
        return LayeredParams([np.zeros(r * c) for r, c in self.shapes], self.shapes)


@dataclass(eq=False)
class LayeredParams:
    """Model parameters partitioned into flat per-layer blocks.

    Arithmetic is blockwise and returns new objects; blocks are never
    mutated in place by library code.
    """

    blocks: list[np.ndarray]
    shapes: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        self.blocks = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.blocks]
        if not self.shapes:
            self.shapes = tuple((b.size, 1) for b in self.blocks)
        self.shapes = tuple((int(r), int(c)) for r, c in self.shapes)
        if len(self.shapes) != len(self.blocks):
            raise ShapeError("shape metadata does not match block count")
        for b, (r, c) in zip(self.blocks, self.shapes):
            if b.size != r * c:
                raise ShapeError(f"block of length {b.size} does not fit shape {(r, c)}")

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, j: int) -> np.ndarray:
        return self.blocks[j]

    def __iter__(self):
        return iter(self.blocks)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(b.size for b in self.blocks)

    @property
    def size(self) -> int:
        return sum(self.sizes)

    def matrix(self, j: int) -> np.ndarray:
        return self.blocks[j].reshape(self.shapes[j])

    def _check(self, other: "LayeredParams"):
        if self.shapes != other.shapes:
            raise ShapeError(f"layout mismatch: {self.shapes} vs {other.shapes}")

    def __add__(self, other: "LayeredParams") -> "LayeredParams":
        self._check(other)
        return LayeredParams([a + b for a, b in zip(self.blocks, other.blocks)], self.shapes)

    def __sub__(self, other: "LayeredParams") -> "LayeredParams":
        self._check(other)
        return LayeredParams([a - b for a, b in zip(self.blocks, other.blocks)], self.shapes)

    def __mul__(self, scalar: float) -> "LayeredParams":
        return LayeredParams([scalar * b for b in self.blocks], self.shapes)

    __rmul__ = __mul__

    def __neg__(self) -> "LayeredParams":
        return LayeredParams([-b for b in self.blocks], self.shapes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayeredParams) or self.shapes != other.shapes:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.blocks, other.blocks))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.blocks) if self.blocks else np.zeros(0)

    def unflatten(self, vec: np.ndarray) -> "LayeredParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ShapeError(f"vector length {vec.size} != parameter count {self.size}")
        splits = np.cumsum(self.sizes)[:-1]
        return LayeredParams([b.copy() for b in np.split(vec, splits)], self.shapes)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(b @ b) for b in self.blocks)))

    def zeros_like(self) -> "LayeredParams":
        return LayeredParams([np.zeros_like(b) for b in self.blocks], self.shapes)

    def copy(self) -> "LayeredParams":
        return LayeredParams([b.copy() for b in self.blocks], self.shapes)

    def replace_block(self, j: int, block: np.ndarray) -> "LayeredParams":
        blocks = list(self.blocks)
        blocks[j] = np.asarray(block, dtype=np.float64).reshape(-1)
        return LayeredParams(blocks, self.shapes)

    def is_finite(self) -> bool:
        return all(bool(np.isfinite(b).all()) for b in self.blocks)

    def max_abs_diff(self, other: "LayeredParams") -> float:
        self._check(other)
        return max((float(np.max(np.abs(a - b))) if a.size else 0.0)
                   for a, b in zip(self.blocks, other.blocks))

    @staticmethod
    def weighted_sum(items: Sequence["LayeredParams"], weights: Sequence[float]) -> "LayeredParams":
        if not items:
            raise EmptyInputError("weighted sum over no parameter sets")
        first = items[0]
        blocks = [np.zeros_like(b) for b in first.blocks]
        for p, w in zip(items, weights):
            first._check(p)
            for acc, b in zip(blocks, p.blocks):
                acc += w * b
        return LayeredParams(blocks, first.shapes)


def as_arrays(dataset, spec: ModelSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Coerce a dataset into ``(X, y)`` arrays.

    Accepts anything with ``X``/``y`` attributes, an ``(X, y)`` tuple of
    arrays, or an iterable of :class:`LabeledSample`.
    """
    if hasattr(dataset, "X") and hasattr(dataset, "y"):
        X, y = dataset.X, dataset.y
    elif isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        X, y = dataset
    else:
        samples = list(dataset)
        if not samples:
            raise EmptyInputError("dataset is empty")
        X = np.array([np.asarray(s.features, dtype=np.float64) for s in samples])
        y = np.array([int(s.label) for s in samples])
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim == 1:
        X = X[None, :]
    if len(X) == 0:
        raise EmptyInputError("dataset is empty")
    if len(y) != len(X):
        raise ShapeError("feature and label counts differ")
    if spec is not None:
        if X.shape[1] != spec.input_dim:
            raise ShapeError(f"expected {spec.input_dim} features, got {X.shape[1]}")
        if y.min() < 0 or y.max() >= spec.classes:
            raise ShapeError(f"labels must lie in [0, {spec.classes})")
    return X, y


def _check_params(spec: ModelSpec, params: LayeredParams):
    if params.shapes != spec.shapes:
        raise ShapeError(f"parameters {params.shapes} do not match model {spec.shapes}")


def _activate(spec: ModelSpec, a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0) if spec.activation == "relu" else a


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _forward_batch(spec: ModelSpec, params: LayeredParams, X: np.ndarray):
    """Return (layer inputs, pre-activations, logits) for a batch."""
    inputs, preacts = [], []
    h = X
    n_layers = len(spec.hidden) + 1
    for layer in range(n_layers):
        W = params.matrix(2 * layer)
        b = params.blocks[2 * layer + 1]
        inputs.append(h)
        a = h @ W.T + b
        if layer < n_layers - 1:
            preacts.append(a)
            h = _activate(spec, a)
        else:
            logits = a
    return inputs, preacts, logits


def _backward_deltas(spec: ModelSpec, params: LayeredParams, X: np.ndarray, y: np.ndarray):
    """Per-example error signals dL_i/d(pre-activation) for every layer."""
    inputs, preacts, logits = _forward_batch(spec, params, X)
    delta = _softmax(logits)
    delta[np.arange(len(y)), y] -= 1.0
    deltas = [delta]
    for layer in range(len(spec.hidden), 0, -1):
        W = params.matrix(2 * layer)
        back = delta @ W
        if spec.activation == "relu":
            back = back * (preacts[layer - 1] > 0)
        delta = back
        deltas.append(delta)
    deltas.reverse()
    return inputs, deltas


def forward(spec: ModelSpec, params: LayeredParams, x) -> np.ndarray:
    """Class probabilities for one feature vector (or a batch of rows)."""
    _check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[-1] != spec.input_dim:
        raise ShapeError(f"expected {spec.input_dim} features, got {X.shape[-1]}")
    probs = _softmax(_forward_batch(spec, params, X)[2])
    return probs[0] if single else probs


def per_sample_losses(spec: ModelSpec, params: LayeredParams, dataset) -> np.ndarray:
    _check_params(spec, params)
    X, y = as_arrays(dataset, spec)
    logp = _log_softmax(_forward_batch(spec, params, X)[2])
    return -logp[np.arange(len(y)), y]


def loss(spec: ModelSpec, params: LayeredParams, dataset) -> float:
    """Mean cross-entropy over the dataset."""
    return float(np.mean(per_sample_losses(spec, params, dataset)))


def grad(spec: ModelSpec, params: LayeredParams, dataset) -> LayeredParams:
    """Gradient of the mean cross-entropy with respect to every block."""
    _check_params(spec, params)
    X, y = as_arrays(dataset, spec)
    inputs, deltas = _backward_deltas(spec, params, X, y)
    n = len(y)
    blocks = []
    for h, d in zip(inputs, deltas):
        blocks.append((d.T @ h).reshape(-1) / n)
        blocks.append(d.sum(axis=0) / n)
    return LayeredParams(blocks, params.shapes)


def per_example_grads(spec: ModelSpec, params: LayeredParams, dataset,
                      layers: Iterable[int] | None = None) -> dict[int, np.ndarray]:
    """Per-sample gradient rows for the requested blocks.

    Returns ``{block index: array of shape (n, block length)}``.
    """
    _check_params(spec, params)
    X, y = as_arrays(dataset, spec)
    layers = range(spec.num_blocks) if layers is None else list(layers)
    for j in layers:
        if not 0 <= j < spec.num_blocks:
            raise IndexError(f"layer {j} out of range for {spec.num_blocks} blocks")
    inputs, deltas = _backward_deltas(spec, params, X, y)
    out = {}
    for j in layers:
        d = deltas[j // 2]
        if j % 2:
            out[j] = d.copy()
        else:
            h = inputs[j // 2]
            out[j] = (d[:, :, None] * h[:, None, :]).reshape(len(y), -1)
    return out


def per_example_grad(spec: ModelSpec, params: LayeredParams, z: LabeledSample, layer: int) -> np.ndarray:
    """Gradient of a single sample's loss restricted to one block."""
    if not 0 <= layer < spec.num_blocks:
        raise IndexError(f"layer {layer} out of range for {spec.num_blocks} blocks")
    return per_example_grads(spec, params, [z], [layer])[layer][0]


def accuracy(spec: ModelSpec, params: LayeredParams, dataset) -> float:
    """Fraction of argmax hits; ``np.argmax`` breaks ties toward the lowest class."""
    _check_params(spec, params)
    X, y = as_arrays(dataset, spec)
    logits = _forward_batch(spec, params, X)[2]
    return float(np.mean(np.argmax(logits, axis=1) == y))


def _softmax_curvature(probs: np.ndarray) -> np.ndarray:
    """diag(p) - p p^T for every row of ``probs``; shape (n, C, C)."""
    return np.einsum("ia,ab->iab", probs, np.eye(probs.shape[1])) - probs[:, :, None] * probs[:, None, :]


def exact_layer_hessian(spec: ModelSpec, params: LayeredParams, dataset, layer: int,
                        cap: int = DEFAULT_HESSIAN_CAP, fd_step: float = 1e-5) -> np.ndarray:
    """Dense Hessian of the mean loss with respect to one block, others frozen.

    Output-layer blocks use the closed form ``E[(diag p - p p^T) kron h h^T]``.
    Hidden blocks are obtained by central differences of :func:`grad`, then
    symmetrised; ReLU kinks are treated as having zero curvature.
    """
    _check_params(spec, params)
    if not 0 <= layer < spec.num_blocks:
        raise IndexError(f"layer {layer} out of range for {spec.num_blocks} blocks")
    size = params.sizes[layer]
    if size > cap:
        raise CapacityError(f"block {layer} has {size} parameters, dense cap is {cap}")
    X, y = as_arrays(dataset, spec)
    n = len(y)
    out_layer = len(spec.hidden)
    if layer // 2 == out_layer:
        inputs, _, logits = _forward_batch(spec, params, X)
        S = _softmax_curvature(_softmax(logits))
        if layer % 2:
            H = S.sum(axis=0) / n
        else:
            h = inputs[out_layer]
            C, d = S.shape[1], h.shape[1]
            H = np.einsum("iac,ib,id->abcd", S, h, h, optimize=True).reshape(C * d, C * d) / n
    else:
        H = np.empty((size, size))
        base = params.blocks[layer]
        for e in range(size):
            step = np.zeros(size)
            step[e] = fd_step
            g_plus = grad(spec, params.replace_block(layer, base + step), (X, y)).blocks[layer]
            g_minus = grad(spec, params.replace_block(layer, base - step), (X, y)).blocks[layer]
            H[:, e] = (g_plus - g_minus) / (2 * fd_step)
    return 0.5 * (H + H.T)
