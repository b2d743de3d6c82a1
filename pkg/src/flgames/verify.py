"""Self-contained oracle checks, runnable without pytest (``flgames verify``)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import datagen as dg
from . import nnkernel as nn
from .game import EnsembleView, ParamBuffer, composed_loss
from .harness import oscillation_metrics
from .nnkernel import MlpParams


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    a, b = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def central_difference(f: Callable[[np.ndarray], float], x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x0, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


@dataclass
class ComposedProblem:
    phi: MlpParams
    candidate: MlpParams
    view: EnsembleView
    x: np.ndarray
    y: np.ndarray

    def members(self, candidate=None) -> list[MlpParams]:
        return [candidate or self.candidate, *self.view.constants()]

    def loss(self, candidate: Optional[MlpParams] = None, phi: Optional[MlpParams] = None) -> float:
        return composed_loss(self.members(candidate), phi or self.phi, self.x, self.y, self.view.divisor).loss


def make_composed_problem(
    phi_dims: Sequence[int],
    head_dims: Sequence[int],
    n_opponents: int = 2,
    history: int = 3,
    n_samples: int = 7,
    seed: int = 0,
) -> ComposedProblem:
    """Random representation, candidate, opponents and filled history buffers."""
    rng = np.random.default_rng(seed)
    phi = nn.init_params(phi_dims, seed, output_activation=nn.ELU)
    candidate = nn.init_params(head_dims, seed + 1)
    opponents, averages = [], []
    for k in range(n_opponents):
        opponents.append(nn.init_params(head_dims, seed + 10 + k))
        buf = ParamBuffer(5)
        for j in range(history):
            buf.insert(nn.init_params(head_dims, seed + 100 + 10 * k + j))
        averages.append(buf.average())
    view = EnsembleView(opponents, averages, float(n_opponents + 1))
    x = rng.normal(size=(n_samples, phi_dims[0]))
    y = rng.integers(0, head_dims[-1], size=n_samples)
    return ComposedProblem(phi, candidate, view, x, y)


def gradcheck_composed(problem: ComposedProblem, h: float = 1e-5) -> tuple[float, float]:
    """Max relative error of the candidate and representation gradients vs central differences."""
    res = composed_loss(
        problem.members(), problem.phi, problem.x, problem.y, problem.view.divisor,
        grad_member=0, grad_phi=True,
    )
    cand_fd = central_difference(
        lambda v: problem.loss(candidate=problem.candidate.from_flat(v)), problem.candidate.flat(), h
    )
    phi_fd = central_difference(lambda v: problem.loss(phi=problem.phi.from_flat(v)), problem.phi.flat(), h)
    return relative_error(res.member.flat(), cand_fd), relative_error(res.phi.flat(), phi_fd)


def check_gradients(tol: float = 1e-4) -> CheckResult:
    start = time.perf_counter()
    worst = 0.0
    shapes = [([8, 6], [6, 4]), ([8, 6, 6], [6, 4]), ([8, 6], [6, 6, 4]), ([3, 2], [2, 2])]
    for i, (pd, hd) in enumerate(shapes):
        for seed in range(3):
            e1, e2 = gradcheck_composed(make_composed_problem(pd, hd, seed=17 * i + seed))
            worst = max(worst, e1, e2)
    secs = time.perf_counter() - start
    return CheckResult("composed-loss gradients", worst < tol and secs < 10,
                       f"max rel err {worst:.2e} (tol {tol:.0e}), {secs:.2f}s")


def binomial_band(n: int, p: float, k: float = 3.0) -> float:
    return k * math.sqrt(p * (1 - p) / n)


def dataset_rates(ds: dg.SpuriousDataset) -> tuple[float, float]:
    """Empirical P(y != y~) and P(z != y)."""
    return float(np.mean(ds.labels != ds.clean_labels)), float(np.mean(ds.spurious != ds.labels))


def generator_samples(n: int, spec: dg.EnvSpec, seed: int) -> dict[str, dg.SpuriousDataset]:
    """One dataset per generator, built on tiny random images so n = 100k stays cheap."""
    rng = np.random.default_rng(seed)
    spec = dg.EnvSpec(spec.client_id, spec.delta, spec.p_spurious, n, spec.role)
    clean = rng.integers(0, 2, size=n)
    clean10 = rng.integers(0, 10, size=n)
    tiny = rng.integers(0, 256, size=(n, 2, 2), dtype=np.uint8)
    patches = rng.integers(0, 256, size=(n, 5, 5), dtype=np.uint8)
    return {
        "synthetic-sem": dg.synth_sem_generate(spec, 1, seed, causal_dim=1, spurious_dim=1),
        "color": dg.make_image_dataset(tiny, clean, spec, seed + 1, "color"),
        "palette": dg.make_image_dataset(tiny, clean10, spec, seed + 2, "palette", 10),
        "patch": dg.make_image_dataset(patches, clean, spec, seed + 3, "patch"),
    }


def dataset_statistics(n: int = 100_000, seed: int = 0) -> list[tuple[str, int, float, float, float, float]]:
    """(generator, client, noise rate, spurious rate, noise z-score, spurious z-score) per generator and spec."""
    rows = []
    for spec in dg.standard_specs(2 * n, n):
        for name, ds in generator_samples(n, spec, seed + spec.client_id).items():
            noise, spur = dataset_rates(ds)
            m = len(ds.labels)
            z_noise = abs(noise - spec.delta) / binomial_band(m, spec.delta, 1.0)
            z_spur = abs(spur - spec.p_spurious) / binomial_band(m, spec.p_spurious, 1.0)
            rows.append((name, spec.client_id, noise, spur, z_noise, z_spur))
    return rows


def check_dataset_statistics(n: int = 100_000, seed: int = 0) -> CheckResult:
    worst = max(max(r[4], r[5]) for r in dataset_statistics(n, seed))
    return CheckResult("dataset statistics", worst <= 3.0, f"worst deviation {worst:.2f} sd (limit 3)")


def check_buffer_drift(cycles: int = 1000, seed: int = 0) -> CheckResult:
    buf = ParamBuffer(5)
    rng = np.random.default_rng(seed)
    for _ in range(cycles):
        w = nn.init_params([4, 3, 2], int(rng.integers(1 << 31)))
        buf.insert(nn.scale(w, float(rng.uniform(-50, 50))))
    direct = np.sum([w.flat() for w in buf], axis=0)
    err = float(np.max(np.abs(buf.running_sum().flat() - direct)))
    return CheckResult("buffer running sum", err < 1e-9, f"drift {err:.2e} after {cycles} inserts")


def check_oscillation_oracles() -> CheckResult:
    alt = [0.6, 0.4] * 20
    square = ([0.8] * 25 + [0.5] * 25) * 8
    f_alt, i_alt = oscillation_metrics(alt, 20)
    _, i_sq = oscillation_metrics(square, 200)
    f_mono, i_mono = oscillation_metrics(list(range(50)), 20)
    ok = f_alt == 1.0 and i_alt == 1.0 and abs(i_sq - 25) < 1e-12 and f_mono == 0 and i_mono == 0
    return CheckResult("oscillation metrics", ok,
                       f"alternating ({f_alt}, {i_alt}), square interval {i_sq}, monotone ({f_mono}, {i_mono})")


CHECKS = (check_gradients, check_dataset_statistics, check_buffer_drift, check_oscillation_oracles)


def run_all(echo: Callable[[str], None] = print) -> bool:
    ok = True
    for check in CHECKS:
        res = check()
        echo(res.line())
        ok &= res.ok
    return ok
