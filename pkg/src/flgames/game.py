"""Per-client mechanics of the ensemble game.

A client's action is its predictor. Its local objective is the
cross-entropy of an ensemble in which only its own candidate predictor is
free; opponents' current predictors (and, in smooth variants, the average
of their recent predictors) enter as constants.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nnkernel as nn
from .errors import ConfigError, EmptyBufferError, ShapeError
from .nnkernel import MlpParams, OptimState

DIVISOR_CLIENTS = "clients"  # 1/|S| as printed in the smoothed objective
DIVISOR_TERMS = "terms"  # 1/(number of summands), an experimental alternative

SMOOTH_LITERAL = "literal"  # candidate + current opponents + opponents' buffer averages
SMOOTH_HISTORY = "history"  # candidate + opponents' buffer averages (uniform play over history)


class ParamBuffer:
    """FIFO of past predictors with an incrementally maintained parameter sum."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: deque[MlpParams] = deque()
        self._sum: Optional[list[np.ndarray]] = None

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def insert(self, params: MlpParams) -> Optional[MlpParams]:
        """Append ``params``; returns the evicted oldest entry when full."""
        arrays = params.arrays()
        if self._sum is None:
            self._sum = [a.copy() for a in arrays]
        else:
            self._items[0].check_compatible(params)
            for acc, a in zip(self._sum, arrays):
                acc += a
        self._items.append(params)
        if len(self._items) > self.capacity:
            old = self._items.popleft()
            for acc, a in zip(self._sum, old.arrays()):
                acc -= a
            return old
        return None

    def running_sum(self) -> MlpParams:
        if not self._items:
            raise EmptyBufferError("buffer is empty")
        return self._items[0].with_arrays([a.copy() for a in self._sum])

    def average(self) -> MlpParams:
        if not self._items:
            raise EmptyBufferError("buffer is empty")
        k = len(self._items)
        return self._items[0].with_arrays([a / k for a in self._sum])


def buffer_average(buffer: ParamBuffer) -> MlpParams:
    return buffer.average()


class BatchStream:
    """Seeded minibatch order: a fresh permutation per epoch, last batch may be short."""

    def __init__(self, n: int, batch_size: int, seed):
        if n <= 0:
            raise ConfigError("cannot draw batches from an empty dataset")
        if batch_size <= 0:
            raise ConfigError("batch size must be positive")
        self.n = n
        self.batch_size = batch_size
        self._rng = np.random.default_rng(seed)
        self._order = self._rng.permutation(n)
        self.cursor = 0
        self.epoch = 0

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.n / self.batch_size)

    def next_indices(self) -> np.ndarray:
        if self.cursor >= self.n:
            self._order = self._rng.permutation(self.n)
            self.cursor = 0
            self.epoch += 1
        idx = self._order[self.cursor : self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return idx


@dataclass
class ClientState:
    client_id: int
    predictor: MlpParams
    optim: OptimState
    buffer: ParamBuffer
    inputs: np.ndarray
    labels: np.ndarray
    batches: BatchStream
    phi_batches: BatchStream
    # P_k: copies of every opponent's predictor and buffer average from the last exchange
    snapshot: dict[int, MlpParams] = field(default_factory=dict)
    snapshot_buffers: dict[int, Optional[MlpParams]] = field(default_factory=dict)
    last_loss: float = float("nan")

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[idx], self.labels[idx]


@dataclass
class EnsembleView:
    """What client k sees: opponents' predictors, their buffer averages, and |S|."""

    opponents: list[MlpParams]
    opponent_buffers: list[MlpParams]
    divisor: float

    @classmethod
    def for_client(
        cls,
        state: ClientState,
        n_clients: int,
        smooth: bool,
        divisor_mode: str = DIVISOR_CLIENTS,
        smooth_mode: str = SMOOTH_LITERAL,
    ) -> "EnsembleView":
        ids = sorted(state.snapshot)
        if state.client_id in ids:
            raise ShapeError("a client's information set must not contain itself")
        opponents = [state.snapshot[i] for i in ids]
        buffers = []
        if smooth and smooth_mode == SMOOTH_LITERAL:
            # an opponent with an empty buffer contributes no history term
            buffers = [state.snapshot_buffers[i] for i in ids if state.snapshot_buffers.get(i) is not None]
        elif smooth and smooth_mode == SMOOTH_HISTORY:
            # history replaces the current model once the opponent has played at least once
            opponents = [state.snapshot_buffers.get(i) or state.snapshot[i] for i in ids]
        elif smooth:
            raise ConfigError(f"unknown smooth mode {smooth_mode!r}")
        if divisor_mode == DIVISOR_CLIENTS:
            divisor = float(n_clients)
        elif divisor_mode == DIVISOR_TERMS:
            divisor = float(1 + len(opponents) + len(buffers))
        else:
            raise ConfigError(f"unknown divisor mode {divisor_mode!r}")
        return cls(opponents, buffers, divisor)

    def constants(self) -> list[MlpParams]:
        return list(self.opponents) + list(self.opponent_buffers)


def _embed(phi: Optional[MlpParams], x: np.ndarray):
    if phi is None:
        return np.asarray(x, dtype=np.float64), None
    return nn.forward(phi, x)


def ensemble_logits(predictors: Sequence[MlpParams], phi: Optional[MlpParams], x) -> np.ndarray:
    """Mean of the predictors' logits on phi(x); ``phi=None`` is the identity map."""
    if not predictors:
        raise ShapeError("ensemble needs at least one predictor")
    h, _ = _embed(phi, x)
    total = None
    for w in predictors:
        out, _ = nn.forward(w, h)
        total = out if total is None else total + out
    return total / len(predictors)


def smoothed_ensemble_logits(
    view: EnsembleView, candidate: MlpParams, phi: Optional[MlpParams], x
) -> np.ndarray:
    """(candidate + current opponents + opponents' buffer averages) / divisor, on phi(x)."""
    h, _ = _embed(phi, x)
    total, _ = nn.forward(candidate, h)
    for w in view.constants():
        out, _ = nn.forward(w, h)
        total = total + out
    return total / view.divisor


@dataclass
class ComposedGrads:
    loss: float
    logits: np.ndarray
    member: Optional[MlpParams] = None
    phi: Optional[MlpParams] = None


def composed_loss(
    members: Sequence[MlpParams],
    phi: Optional[MlpParams],
    x,
    y,
    divisor: float,
    grad_member: Optional[int] = None,
    grad_phi: bool = False,
) -> ComposedGrads:
    """Cross-entropy of sum(member(phi(x))) / divisor with selected exact gradients.

    Only ``members[grad_member]`` and (optionally) phi receive gradients; all
    other members are constants.
    """
    if grad_phi and phi is None:
        raise ConfigError("identity representation has no parameters")
    h, phi_cache = _embed(phi, x)
    outs, caches = [], []
    for w in members:
        out, cache = nn.forward(w, h)
        outs.append(out)
        caches.append(cache)
    logits = sum(outs[1:], outs[0]) / divisor
    loss, dlogits = nn.softmax_cross_entropy(logits, y)
    dmember = dlogits / divisor
    result = ComposedGrads(loss, logits)
    dh = None
    for i, (w, cache) in enumerate(zip(members, caches)):
        if i != grad_member and not grad_phi:
            continue
        g, dx = nn.backward(w, cache, dmember)
        if i == grad_member:
            result.member = g
        if grad_phi:
            dh = dx if dh is None else dh + dx
    if grad_phi:
        result.phi, _ = nn.backward(phi, phi_cache, dh)
    return result


def local_objective(
    view: EnsembleView, candidate: MlpParams, phi: Optional[MlpParams], x, y
) -> tuple[float, MlpParams]:
    """Loss of the smoothed ensemble and its gradient w.r.t. the candidate only."""
    res = composed_loss([candidate, *view.constants()], phi, x, y, view.divisor, grad_member=0)
    return res.loss, res.member


def _step(state: ClientState, grads: MlpParams, optimizer: str) -> None:
    if optimizer == "adam":
        state.predictor, state.optim = nn.adam_step(state.predictor, grads, state.optim)
    elif optimizer == "sgd":
        state.predictor = nn.sgd_step(state.predictor, grads, state.optim.lr)
        state.optim.t += 1
    else:
        raise ConfigError(f"unknown optimizer {optimizer!r}")


def predictor_update(
    state: ClientState,
    view: EnsembleView,
    phi: Optional[MlpParams],
    local_steps: int = 1,
    optimizer: str = "adam",
    smooth: bool = True,
) -> ClientState:
    """Approximate best response: ``local_steps`` optimizer steps on successive minibatches.

    The view is held fixed across the steps. In smooth variants the resulting
    predictor is pushed into the client's FIFO buffer afterwards.
    """
    if local_steps < 1:
        raise ConfigError("local_steps must be >= 1")
    if state.n_samples == 0:
        raise ConfigError(f"client {state.client_id} has no data")
    losses = []
    for _ in range(local_steps):
        x, y = state.batch(state.batches.next_indices())
        loss, grads = local_objective(view, state.predictor, phi, x, y)
        losses.append(loss)
        _step(state, grads, optimizer)
    state.last_loss = float(np.mean(losses))
    if smooth:
        state.buffer.insert(state.predictor)
    return state


def exact_steps(c_percent: float, batches_per_epoch: int) -> int:
    if not 0 < c_percent <= 100:
        raise ConfigError(f"C% must lie in (0, 100], got {c_percent}")
    # guard against 12.5/100*8 landing a hair above an integer
    return max(1, math.ceil(round(c_percent / 100.0 * batches_per_epoch, 9)))


def exact_predictor_update(
    state: ClientState,
    view: EnsembleView,
    phi: Optional[MlpParams],
    c_percent: float = 100.0,
    optimizer: str = "adam",
    smooth: bool = True,
) -> ClientState:
    """Closer-to-exact best response: ceil(C% of an epoch) sequential minibatch steps."""
    steps = exact_steps(c_percent, state.batches.batches_per_epoch)
    return predictor_update(state, view, phi, steps, optimizer, smooth)
