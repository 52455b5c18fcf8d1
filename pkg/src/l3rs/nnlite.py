"""Minimal dense-network core: fully-connected ReLU classifiers with exact
reverse-mode gradients, used as the inner models that optimizers train.

Everything is float64 and purely functional: no operation mutates its inputs,
so concurrent evaluations can share specs and parameter sets freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KERNEL = "kernel"
BIAS = "bias"


class DivergenceError(RuntimeError):
    """Raised when a forward/backward pass produces non-finite values."""


@dataclass(frozen=True)
class ComponentId:
    """One named parameter tensor ("layer" from the optimizer's view).

    Indices are dense 0..L-1 in a deterministic order: for each dense layer
    in input-to-output order, kernel first, then bias.
    """

    index: int
    name: str
    kind: str  # KERNEL or BIAS


@dataclass(frozen=True)
class NetworkSpec:
    """Fully-connected ReLU net: input_dim -> hidden[0] -> ... -> output_dim.

    Hidden layers use ReLU, the output layer is linear (logits).
    ``hidden`` may be empty, giving a single dense layer.
    """

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {dims}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden, self.output_dim)
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def components(self) -> list[ComponentId]:
        out = []
        for layer, _ in enumerate(self.layer_dims()):
            out.append(ComponentId(2 * layer, f"layer{layer}/{KERNEL}", KERNEL))
            out.append(ComponentId(2 * layer + 1, f"layer{layer}/{BIAS}", BIAS))
        return out

    def component_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in self.layer_dims():
            shapes.append((fan_in, fan_out))
            shapes.append((fan_out,))
        return shapes


@dataclass
class ParamSet:
    """Ordered (ComponentId, tensor) pairs for one network."""

    ids: list[ComponentId]
    tensors: list[np.ndarray]

    def __post_init__(self):
        if len(self.ids) != len(self.tensors):
            raise ValueError("ids and tensors must have equal length")

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return zip(self.ids, self.tensors)

    def copy(self) -> "ParamSet":
        return ParamSet(list(self.ids), [t.copy() for t in self.tensors])

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])


@dataclass
class Batch:
    """Classification batch: x is [n, input_dim] float64, y is [n] int labels."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.ndim != 1 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError("batch shapes disagree")
        if self.x.shape[0] < 1:
            raise ValueError("batch must contain at least one row")


def init_params(spec: NetworkSpec, seed: int) -> ParamSet:
    """Draw a fresh parameter set, deterministic in ``seed``.

    Kernels are zero-mean normal with variance 1/fan_in; biases are zero.
    """
    rng = np.random.default_rng(seed)
    tensors = []
    for fan_in, fan_out in spec.layer_dims():
        tensors.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))
        tensors.append(np.zeros(fan_out))
    return ParamSet(spec.components(), tensors)


def _forward_cached(spec: NetworkSpec, params: ParamSet, x: np.ndarray):
    """Forward pass keeping pre-activations and activations for backprop."""
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(
            f"input has shape {x.shape}, expected [n, {spec.input_dim}]"
        )
    n_layers = len(spec.layer_dims())
    acts = [x]
    pre = []
    h = x
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in range(n_layers):
            w = params.tensors[2 * layer]
            b = params.tensors[2 * layer + 1]
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if layer < n_layers - 1 else z
            acts.append(h)
    return pre, acts


def forward(spec: NetworkSpec, params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Logits [n, output_dim] for inputs x [n, input_dim]."""
    _, acts = _forward_cached(spec, params, x)
    return acts[-1]


def _cross_entropy_parts(logits: np.ndarray, y: np.ndarray):
    # max-shifted log-sum-exp keeps large logits from overflowing
    shift = logits.max(axis=1, keepdims=True)
    with np.errstate(over="ignore", invalid="ignore"):
        exp = np.exp(logits - shift)
        lse = shift[:, 0] + np.log(exp.sum(axis=1))
        loss = float(np.mean(lse - logits[np.arange(len(y)), y]))
        softmax = exp / exp.sum(axis=1, keepdims=True)
    return loss, softmax


def mean_cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    loss, _ = _cross_entropy_parts(logits, y)
    return loss


def loss_and_grad(spec: NetworkSpec, params: ParamSet, batch: Batch) -> tuple[float, ParamSet]:
    """Mean softmax cross-entropy and its exact gradient.

    The returned gradient mirrors ``params`` component for component.
    Raises DivergenceError if any intermediate stops being finite, which
    callers treat as inner-loop divergence.
    """
    n_layers = len(spec.layer_dims())
    pre, acts = _forward_cached(spec, params, batch.x)
    loss, softmax = _cross_entropy_parts(acts[-1], batch.y)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")

    n = batch.x.shape[0]
    delta = softmax
    delta[np.arange(n), batch.y] -= 1.0
    delta /= n

    grads: list[np.ndarray] = [None] * (2 * n_layers)  # type: ignore[list-item]
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in range(n_layers - 1, -1, -1):
            grads[2 * layer] = acts[layer].T @ delta
            grads[2 * layer + 1] = delta.sum(axis=0)
            if layer > 0:
                w = params.tensors[2 * layer]
                delta = (delta @ w.T) * (pre[layer - 1] > 0)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    return loss, ParamSet(list(params.ids), grads)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax matches the label.

    np.argmax breaks ties toward the lowest class index.
    """
    if logits.shape[0] != len(labels):
        raise ValueError("logits and labels disagree in length")
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
