"""Server loop: alternating representation / predictor rounds, plus FedAVG and FedSGD baselines."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np

from . import nnkernel as nn
from .datagen import SpuriousDataset
from .errors import ConfigError, VariantError
from .game import (
    DIVISOR_CLIENTS,
    DIVISOR_TERMS,
    SMOOTH_HISTORY,
    SMOOTH_LITERAL,
    BatchStream,
    ClientState,
    EnsembleView,
    ParamBuffer,
    composed_loss,
    ensemble_logits,
    exact_steps,
    predictor_update,
)
from .nnkernel import ELU, MlpParams, OptimState

FIXED = "fixed"
VARIABLE = "variable"
SEQUENTIAL = "sequential"
PARALLEL = "parallel"


@dataclass
class GameConfig:
    variant_phi: str = FIXED
    schedule: str = SEQUENTIAL
    smooth: bool = False
    fast_phi: bool = False
    buffer_capacity: int = 5
    # share of an epoch used for each phi gradient; None means a single minibatch
    c_percent: Optional[float] = None
    local_steps: int = 1
    # share of an epoch per predictor update (exact best response); overrides local_steps
    predictor_c_percent: Optional[float] = None
    batch_size: int = 256
    lr_phi: float = 2.5e-5
    lr_w: float = 2.5e-4
    optimizer: str = "adam"
    phi_optimizer: str = "sgd"
    max_rounds: int = 1000
    stop_threshold: Optional[float] = None
    warm_start_override: Optional[int] = None
    # warm start as plays per client: K*N rounds under sequential play, K rounds under parallel
    warm_start_plays: Optional[int] = None
    skip_phi_rounds: bool = False
    divisor_mode: str = DIVISOR_CLIENTS
    smooth_mode: str = SMOOTH_LITERAL
    hidden: tuple[int, ...] = (390, 390)
    phi_dim: int = 390
    eval_cap: int = 10000

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        checks = [
            (self.variant_phi in (FIXED, VARIABLE), f"variant_phi must be fixed|variable, got {self.variant_phi!r}"),
            (self.schedule in (SEQUENTIAL, PARALLEL), f"schedule must be sequential|parallel, got {self.schedule!r}"),
            (self.buffer_capacity >= 1, "buffer_capacity must be >= 1"),
            (self.c_percent is None or 0 < self.c_percent <= 100, "c_percent must lie in (0, 100]"),
            (self.predictor_c_percent is None or 0 < self.predictor_c_percent <= 100,
             "predictor_c_percent must lie in (0, 100]"),
            (self.local_steps >= 1, "local_steps must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.max_rounds >= 1, "max_rounds must be >= 1"),
            (self.warm_start_override is None or self.warm_start_override >= 0, "warm_start_override must be >= 0"),
            (self.warm_start_plays is None or self.warm_start_plays >= 1, "warm_start_plays must be >= 1"),
            (self.stop_threshold is None or 0 < self.stop_threshold < 1, "stop_threshold must lie in (0, 1)"),
            (self.optimizer in ("adam", "sgd"), "optimizer must be adam|sgd"),
            (self.phi_optimizer in ("adam", "sgd"), "phi_optimizer must be adam|sgd"),
            (self.divisor_mode in (DIVISOR_CLIENTS, DIVISOR_TERMS), "divisor_mode must be clients|terms"),
            (self.smooth_mode in (SMOOTH_LITERAL, SMOOTH_HISTORY), "smooth_mode must be literal|history"),
            (self.eval_cap >= 1, "eval_cap must be >= 1"),
            (self.phi_dim >= 1 and all(h >= 1 for h in self.hidden), "layer widths must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.fast_phi and self.variant_phi != VARIABLE:
            raise ConfigError("the fast variant needs a variable representation")

    @property
    def phi_c_percent(self) -> Optional[float]:
        return 100.0 if self.fast_phi else self.c_percent

    @property
    def name(self) -> str:
        base = ("F" if self.variant_phi == FIXED else "V") + "-FL Games"
        mods = [m for m, on in (("Smooth", self.smooth), ("Fast", self.fast_phi)) if on]
        if mods:
            base += " (" + " + ".join(mods) + ")"
        return ("parallelized " if self.schedule == PARALLEL else "") + base


@dataclass
class RoundLog:
    round: int
    predictor_round: int
    phi_round: bool
    acting: tuple[int, ...]
    train_acc: float
    test_acc: float
    losses: tuple[float, ...]
    comm_rounds: int
    wall_clock: float = 0.0


@dataclass
class ServerState:
    phi: Optional[MlpParams]
    clients: list[ClientState]
    t: int = 1
    seed: int = 0
    predictor_rounds: int = 0
    comm_rounds: int = 0
    phi_optim: Optional[OptimState] = None
    history: list[float] = field(default_factory=list)

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def predictors(self) -> list[MlpParams]:
        return [c.predictor for c in self.clients]


@dataclass
class TrainingResult:
    state: ServerState
    logs: list[RoundLog]
    stopped: bool
    stop_round: Optional[int]
    stop_predictor_round: Optional[int]
    hit_max_rounds: bool
    final_train_acc: float
    final_test_acc: float


# ------------------------------------------------------------ scheduling


def playing_sequence(schedule: str, t: int, n_clients: int) -> tuple[int, ...]:
    """Clients (1-based ids) that act at predictor round ``t``."""
    if t < 1 or n_clients < 1:
        raise ConfigError("t and n_clients must be >= 1")
    if schedule == SEQUENTIAL:
        return (1 + (t - 1) % n_clients,)
    if schedule == PARALLEL:
        return tuple(range(1, n_clients + 1))
    raise ConfigError(f"unknown schedule {schedule!r}")


def is_phi_round(t: int, config: GameConfig) -> bool:
    if config.skip_phi_rounds and config.variant_phi == FIXED:
        return False
    return t % 2 == 0


def warm_start_length(config: GameConfig, n_clients: int, n_train_total: int) -> int:
    """Warm-start span, counted in predictor rounds."""
    if config.warm_start_override is not None:
        return config.warm_start_override
    if config.warm_start_plays is not None:
        return config.warm_start_plays * (n_clients if config.schedule == SEQUENTIAL else 1)
    if config.variant_phi == FIXED:
        return n_clients
    return max(1, n_train_total // config.batch_size)


def stopping_check(history: Sequence[float], config: GameConfig, warm_start_len: int) -> bool:
    """True once past warm start and the latest train accuracy sits below the threshold."""
    if not history:
        raise ConfigError("stopping check needs at least one accuracy")
    if config.stop_threshold is None:
        return False
    return len(history) > warm_start_len and history[-1] < config.stop_threshold


# ----------------------------------------------------------- aggregation


def aggregation_weights(counts: Mapping[int, int]) -> dict[int, float]:
    if any(n <= 0 for n in counts.values()):
        raise ConfigError("sample counts must be positive")
    total = sum(counts.values())
    return {k: float(Fraction(counts[k], total)) for k in sorted(counts)}


def weighted_sum(items: Mapping[int, MlpParams], counts: Mapping[int, int]) -> MlpParams:
    missing = sorted(set(counts) - set(items))
    if missing:
        raise ConfigError(f"no contribution from clients {missing}")
    weights = aggregation_weights(counts)
    ids = sorted(counts)
    acc = nn.scale(items[ids[0]], weights[ids[0]])
    for k in ids[1:]:
        acc = nn.add(acc, nn.scale(items[k], weights[k]))
    return acc


def aggregate_phi(
    phi: MlpParams, grads: Mapping[int, MlpParams], counts: Mapping[int, int], lr: float
) -> MlpParams:
    """phi - lr * sum_k (N_k / N) g_k, summed in ascending client id."""
    return nn.sgd_step(phi, weighted_sum(grads, counts), lr)


def representation_gradient(
    client: ClientState,
    phi: Optional[MlpParams],
    predictors: Sequence[MlpParams],
    c_percent: Optional[float],
) -> tuple[MlpParams, float]:
    """Sum of per-batch gradients of the ensemble loss w.r.t. phi.

    Covers ceil(C% of an epoch) batches; ``c_percent=None`` is one batch.
    Returns (gradient, mean batch loss).
    """
    if phi is None:
        raise VariantError("fixed representation has no gradient")
    n_batches = 1 if c_percent is None else exact_steps(c_percent, client.phi_batches.batches_per_epoch)
    total, losses = None, []
    for _ in range(n_batches):
        x, y = client.batch(client.phi_batches.next_indices())
        res = composed_loss(predictors, phi, x, y, float(len(predictors)), grad_phi=True)
        total = res.phi if total is None else nn.add(total, res.phi)
        losses.append(res.loss)
    return total, float(np.mean(losses))


# ---------------------------------------------------------------- setup


def _child_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def init_server(
    datasets: Sequence[SpuriousDataset], config: GameConfig, seed: int
) -> ServerState:
    if not datasets:
        raise ConfigError("need at least one training client")
    d = datasets[0].dim
    num_classes = datasets[0].num_classes
    n = len(datasets)
    seeds = _child_seeds(seed, 3 * n + 1)
    phi = None
    in_dim = d
    if config.variant_phi == VARIABLE:
        phi = nn.init_params([d, config.phi_dim], _seed_int(seeds[-1]), output_activation=ELU)
        in_dim = config.phi_dim
    dims = [in_dim, *config.hidden, num_classes]
    clients = []
    for i, ds in enumerate(datasets):
        w = nn.init_params(dims, _seed_int(seeds[3 * i]))
        clients.append(
            ClientState(
                client_id=i + 1,
                predictor=w,
                optim=OptimState.for_params(w, lr=config.lr_w),
                buffer=ParamBuffer(config.buffer_capacity),
                inputs=ds.inputs,
                labels=ds.labels,
                batches=BatchStream(len(ds), config.batch_size, seeds[3 * i + 1]),
                phi_batches=BatchStream(len(ds), config.batch_size, seeds[3 * i + 2]),
            )
        )
    state = ServerState(phi, clients, seed=seed)
    if phi is not None and config.phi_optimizer == "adam":
        state.phi_optim = OptimState.for_params(phi, lr=config.lr_phi)
    communicate(state)
    return state


def communicate(state: ServerState) -> None:
    """Every client refreshes its copies of the opponents' predictors and buffer averages."""
    predictors = {c.client_id: c.predictor for c in state.clients}
    averages = {c.client_id: (c.buffer.average() if len(c.buffer) else None) for c in state.clients}
    for c in state.clients:
        c.snapshot = {k: w for k, w in predictors.items() if k != c.client_id}
        c.snapshot_buffers = {k: a for k, a in averages.items() if k != c.client_id}


# ------------------------------------------------------------- evaluation


@dataclass
class EvalSet:
    """Fixed evaluation sample.

    Member logits are cached per ensemble slot and reused while the slot holds
    the same parameter object under the same representation; parameters are
    never mutated in place, so identity implies equal values.
    """

    inputs: np.ndarray
    labels: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def logits(self, predictors: Sequence[MlpParams], phi: Optional[MlpParams]) -> np.ndarray:
        if not predictors:
            raise ConfigError("ensemble needs at least one predictor")
        if self._cache.get("phi_key", False) is not phi:
            h = self.inputs if phi is None else nn.forward(phi, self.inputs)[0]
            self._cache.clear()
            self._cache.update(phi_key=phi, h=h)
        total = None
        for slot, w in enumerate(predictors):
            hit = self._cache.get(slot)
            if hit is None or hit[0] is not w:
                hit = (w, nn.forward(w, self._cache["h"])[0])
                self._cache[slot] = hit
            total = hit[1] if total is None else total + hit[1]
        return total / len(predictors)

    def accuracy(self, predictors: Sequence[MlpParams], phi: Optional[MlpParams]) -> float:
        logits = self.logits(predictors, phi)
        return float(np.mean(np.argmax(logits, axis=1) == self.labels))


def pooled(datasets: Sequence[SpuriousDataset]) -> EvalSet:
    return EvalSet(
        np.vstack([d.inputs for d in datasets]), np.concatenate([d.labels for d in datasets])
    )


def capped(ev: EvalSet, cap: int, seed) -> EvalSet:
    n = len(ev.labels)
    if n <= cap:
        return ev
    idx = np.sort(np.random.default_rng(seed).choice(n, size=cap, replace=False))
    return EvalSet(ev.inputs[idx], ev.labels[idx])


# ------------------------------------------------------------- the loop


def run_round(
    state: ServerState,
    config: GameConfig,
    train_eval: EvalSet,
    test_eval: EvalSet,
) -> tuple[ServerState, RoundLog]:
    start = time.perf_counter()
    t = state.t
    n = state.n_clients
    losses = [float("nan")] * n
    acting: tuple[int, ...] = ()
    phi_round = is_phi_round(t, config)
    if phi_round:
        if config.variant_phi == VARIABLE:
            predictors = state.predictors()
            grads, counts = {}, {}
            for c in state.clients:
                g, loss = representation_gradient(c, state.phi, predictors, config.phi_c_percent)
                grads[c.client_id] = g
                counts[c.client_id] = c.n_samples
                losses[c.client_id - 1] = loss
            if config.phi_optimizer == "adam":
                state.phi, state.phi_optim = nn.adam_step(
                    state.phi, weighted_sum(grads, counts), state.phi_optim
                )
            else:
                state.phi = aggregate_phi(state.phi, grads, counts, config.lr_phi)
            state.comm_rounds += 1
    else:
        state.predictor_rounds += 1
        acting = playing_sequence(config.schedule, state.predictor_rounds, n)
        for cid in acting:
            client = state.clients[cid - 1]
            view = EnsembleView.for_client(
                client, n, config.smooth, config.divisor_mode, config.smooth_mode
            )
            steps = config.local_steps
            if config.predictor_c_percent is not None:
                steps = exact_steps(config.predictor_c_percent, client.batches.batches_per_epoch)
            predictor_update(client, view, state.phi, steps, config.optimizer, config.smooth)
            losses[cid - 1] = client.last_loss
        communicate(state)
        state.comm_rounds += 1 if config.schedule == PARALLEL else len(acting)
    predictors = state.predictors()
    log = RoundLog(
        round=t,
        predictor_round=state.predictor_rounds,
        phi_round=phi_round,
        acting=acting,
        train_acc=train_eval.accuracy(predictors, state.phi),
        test_acc=test_eval.accuracy(predictors, state.phi),
        losses=tuple(losses),
        comm_rounds=state.comm_rounds,
        wall_clock=time.perf_counter() - start,
    )
    state.t += 1
    return state, log


def run_training(
    train: Sequence[SpuriousDataset],
    test: SpuriousDataset,
    config: GameConfig,
    seed: int = 0,
) -> TrainingResult:
    if not train:
        raise ConfigError("need at least one training client")
    state = init_server(train, config, seed)
    eval_seeds = _child_seeds(seed + 1, 2)
    full_train = pooled(train)
    full_test = EvalSet(test.inputs, test.labels)
    train_eval = capped(full_train, config.eval_cap, eval_seeds[0])
    test_eval = capped(full_test, config.eval_cap, eval_seeds[1])
    warm = warm_start_length(config, len(train), len(full_train.labels))
    logs: list[RoundLog] = []
    stopped = False
    while state.t <= config.max_rounds:
        state, log = run_round(state, config, train_eval, test_eval)
        logs.append(log)
        if not log.phi_round:
            state.history.append(log.train_acc)
            if stopping_check(state.history, config, warm):
                stopped = True
                break
    last = logs[-1]
    predictors = state.predictors()
    return TrainingResult(
        state=state,
        logs=logs,
        stopped=stopped,
        stop_round=last.round if stopped else None,
        stop_predictor_round=last.predictor_round if stopped else None,
        hit_max_rounds=not stopped,
        final_train_acc=full_train.accuracy(predictors, state.phi),
        final_test_acc=full_test.accuracy(predictors, state.phi),
    )


# -------------------------------------------------------------- baselines


@dataclass
class BaselineResult:
    model: MlpParams
    logs: list[RoundLog]
    final_train_acc: float
    final_test_acc: float


def _baseline_setup(train, test, config, seed):
    dims = [train[0].dim, *config.hidden, train[0].num_classes]
    seeds = _child_seeds(seed, len(train) + 3)
    model = nn.init_params(dims, _seed_int(seeds[-1]))
    streams = [BatchStream(len(d), config.batch_size, seeds[i]) for i, d in enumerate(train)]
    full_train = pooled(train)
    full_test = EvalSet(test.inputs, test.labels)
    train_eval = capped(full_train, config.eval_cap, seeds[-3])
    test_eval = capped(full_test, config.eval_cap, seeds[-2])
    return model, streams, full_train, full_test, train_eval, test_eval


def _model_grad(model: MlpParams, x, y) -> tuple[float, MlpParams]:
    res = composed_loss([model], None, x, y, 1.0, grad_member=0)
    return res.loss, res.member


def fedsgd_aggregate(grads: Mapping[int, MlpParams], counts: Mapping[int, int]) -> MlpParams:
    return weighted_sum(grads, counts)


def run_fedavg_baseline(
    train: Sequence[SpuriousDataset],
    test: SpuriousDataset,
    config: GameConfig,
    seed: int = 0,
    epochs_per_round: int = 1,
    rounds: int = 10,
) -> BaselineResult:
    """Each round: every client trains a copy of the global model for E epochs; N_k-weighted average."""
    if epochs_per_round < 1:
        raise ConfigError("epochs_per_round must be >= 1")
    model, streams, full_train, full_test, train_eval, test_eval = _baseline_setup(
        train, test, config, seed
    )
    counts = {i + 1: len(d) for i, d in enumerate(train)}
    logs = []
    for r in range(1, rounds + 1):
        start = time.perf_counter()
        locals_, losses = {}, []
        for i, (ds, stream) in enumerate(zip(train, streams)):
            local = model
            opt = OptimState.for_params(local, lr=config.lr_w)
            batch_losses = []
            for _ in range(epochs_per_round * stream.batches_per_epoch):
                idx = stream.next_indices()
                loss, g = _model_grad(local, ds.inputs[idx], ds.labels[idx])
                batch_losses.append(loss)
                if config.optimizer == "adam":
                    local, opt = nn.adam_step(local, g, opt)
                else:
                    local = nn.sgd_step(local, g, config.lr_w)
            locals_[i + 1] = local
            losses.append(float(np.mean(batch_losses)))
        model = weighted_sum(locals_, counts)
        logs.append(
            RoundLog(r, r, False, tuple(counts), train_eval.accuracy([model], None),
                     test_eval.accuracy([model], None), tuple(losses), r,
                     time.perf_counter() - start)
        )
    return BaselineResult(
        model, logs, full_train.accuracy([model], None), full_test.accuracy([model], None)
    )


def run_fedsgd_baseline(
    train: Sequence[SpuriousDataset],
    test: SpuriousDataset,
    config: GameConfig,
    seed: int = 0,
    rounds: int = 100,
) -> BaselineResult:
    """Each round: one minibatch gradient per client, N_k-weighted, one server step."""
    model, streams, full_train, full_test, train_eval, test_eval = _baseline_setup(
        train, test, config, seed
    )
    counts = {i + 1: len(d) for i, d in enumerate(train)}
    opt = OptimState.for_params(model, lr=config.lr_w)
    logs = []
    for r in range(1, rounds + 1):
        start = time.perf_counter()
        grads, losses = {}, []
        for i, (ds, stream) in enumerate(zip(train, streams)):
            idx = stream.next_indices()
            loss, grads[i + 1] = _model_grad(model, ds.inputs[idx], ds.labels[idx])
            losses.append(loss)
        g = fedsgd_aggregate(grads, counts)
        if config.optimizer == "adam":
            model, opt = nn.adam_step(model, g, opt)
        else:
            model = nn.sgd_step(model, g, config.lr_w)
        logs.append(
            RoundLog(r, r, False, tuple(counts), train_eval.accuracy([model], None),
                     test_eval.accuracy([model], None), tuple(losses), r,
                     time.perf_counter() - start)
        )
    return BaselineResult(
        model, logs, full_train.accuracy([model], None), full_test.accuracy([model], None)
    )
