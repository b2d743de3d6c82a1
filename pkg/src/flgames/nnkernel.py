"""Dense MLP kernel: forward, exact backward, cross-entropy, Adam and SGD.

Everything runs in float64. Parameters are treated as immutable values:
every update returns fresh arrays, so references can be shared freely
(snapshots, buffers) without defensive copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, LabelError, ShapeError

ELU = "elu"
IDENTITY = "identity"
_ACTIVATIONS = (ELU, IDENTITY)


@dataclass
class MlpParams:
    """Weights (out_dim x in_dim), biases (out_dim,) and an activation per layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        if not self.weights:
            raise ShapeError("an MLP needs at least one layer")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer emits "
                    f"{self.weights[i - 1].shape[0]}"
                )
            if act not in _ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        """Weights and biases interleaved: [W0, b0, W1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return MlpParams(list(arrays[0::2]), list(arrays[1::2]), list(self.activations))

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec: np.ndarray) -> "MlpParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.array(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {pos}")
        return self.with_arrays(out)

    def check_compatible(self, other: "MlpParams") -> None:
        mine, theirs = self.arrays(), other.arrays()
        if len(mine) != len(theirs) or any(a.shape != b.shape for a, b in zip(mine, theirs)):
            raise ShapeError("parameter sets have different shapes")

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def add(a: MlpParams, b: MlpParams) -> MlpParams:
    a.check_compatible(b)
    return a.with_arrays([x + y for x, y in zip(a.arrays(), b.arrays())])


def sub(a: MlpParams, b: MlpParams) -> MlpParams:
    a.check_compatible(b)
    return a.with_arrays([x - y for x, y in zip(a.arrays(), b.arrays())])


def scale(a: MlpParams, c: float) -> MlpParams:
    return a.with_arrays([x * c for x in a.arrays()])


def max_abs_diff(a: MlpParams, b: MlpParams) -> float:
    a.check_compatible(b)
    return max(float(np.max(np.abs(x - y))) for x, y in zip(a.arrays(), b.arrays()))


def identical(a: MlpParams, b: MlpParams) -> bool:
    """Bit-level equality of two parameter sets."""
    if a.activations != b.activations:
        return False
    xs, ys = a.arrays(), b.arrays()
    return len(xs) == len(ys) and all(
        x.shape == y.shape and np.array_equal(x, y) for x, y in zip(xs, ys)
    )


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ShapeError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError(
                f"{self.inputs.shape[0]} input rows but labels have shape {self.labels.shape}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelError(f"labels must lie in [0, {self.num_classes})")


def init_params(
    layer_dims: Sequence[int], seed: int, output_activation: str = IDENTITY
) -> MlpParams:
    """Uniform(-1, 1)/sqrt(in_dim) weights, zero biases, ELU between layers.

    ``output_activation`` is ELU for a representation network whose output
    feeds another network, identity for a classifier head.
    """
    dims = list(layer_dims)
    if len(dims) < 2:
        raise ConfigError(f"need at least an input and an output size, got {dims}")
    if any(int(d) != d or d <= 0 for d in dims):
        raise ConfigError(f"layer sizes must be positive integers, got {dims}")
    if output_activation not in _ACTIVATIONS:
        raise ConfigError(f"unknown activation {output_activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases, acts = [], [], []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        weights.append(rng.uniform(-1.0, 1.0, size=(d_out, d_in)) / np.sqrt(d_in))
        biases.append(np.zeros(d_out))
        acts.append(output_activation if i == len(dims) - 2 else ELU)
    return MlpParams(weights, biases, acts)


def elu(x):
    """ELU with alpha = 1. Works on scalars and arrays."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return float(x) if x > 0 else float(np.expm1(x))
    out = np.minimum(x, 0.0)
    np.expm1(out, out=out)
    out += np.maximum(x, 0.0)
    return out


def _elu_grad_from_output(pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    # d/dx (exp(x) - 1) = exp(x) = post + 1 on the negative side
    return np.where(pre > 0, 1.0, post + 1.0)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)


def forward(params: MlpParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a row-major batch. Accepts an array or a Batch."""
    if isinstance(x, Batch):
        x = x.inputs
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {h.shape} does not match in_dim {params.in_dim}")
    cache = ForwardCache()
    for w, b, act in zip(params.weights, params.biases, params.activations):
        cache.inputs.append(h)
        pre = h @ w.T + b
        h = elu(pre) if act == ELU else pre
        cache.pre.append(pre)
        cache.post.append(h)
    return h, cache


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its exact gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, c = logits.shape
    if n == 0:
        raise ShapeError("empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    probs = np.exp(shifted - log_norm[:, None])
    probs[rows, labels] -= 1.0
    return max(loss, 0.0), probs / n


def backward(
    params: MlpParams, cache: ForwardCache, dlogits: np.ndarray
) -> tuple[MlpParams, np.ndarray]:
    """Gradients of the scalar loss w.r.t. every weight/bias, plus w.r.t. the inputs."""
    if len(cache.pre) != params.n_layers:
        raise ShapeError("cache was produced by a network with a different depth")
    delta = np.asarray(dlogits, dtype=np.float64)
    if delta.shape != cache.post[-1].shape:
        raise ShapeError(f"dlogits {delta.shape} does not match output {cache.post[-1].shape}")
    gw: list[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    for i in reversed(range(params.n_layers)):
        w = params.weights[i]
        if cache.inputs[i].shape[1] != w.shape[1] or cache.pre[i].shape[1] != w.shape[0]:
            raise ShapeError(f"cache layer {i} does not match parameters")
        if params.activations[i] == ELU:
            delta = delta * _elu_grad_from_output(cache.pre[i], cache.post[i])
        gw[i] = delta.T @ cache.inputs[i]
        gb[i] = delta.sum(axis=0)
        delta = delta @ w
    return MlpParams(gw, gb, list(params.activations)), delta


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 2.5e-4, **kw) -> "OptimState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], lr, **kw)


def adam_step(
    params: MlpParams, grads: MlpParams, state: OptimState
) -> tuple[MlpParams, OptimState]:
    params.check_compatible(grads)
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(state.m) != len(p_arrays) or any(
        m.shape != p.shape for m, p in zip(state.m, p_arrays)
    ):
        raise ShapeError("optimizer moments do not mirror the parameter shapes")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = OptimState(new_m, new_v, state.lr, state.beta1, state.beta2, state.eps, t)
    return params.with_arrays(new_p), new_state


def sgd_step(params: MlpParams, grads: MlpParams, lr: float) -> MlpParams:
    params.check_compatible(grads)
    return params.with_arrays([p - lr * g for p, g in zip(params.arrays(), grads.arrays())])


def predict(params: MlpParams, x) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index."""
    logits, _ = forward(params, x)
    return np.argmax(logits, axis=1)
