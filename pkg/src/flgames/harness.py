"""Experiment plumbing: config files, repeat seeds, sweeps, metrics and on-disk logs."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import datagen as dg
from .errors import ConfigError, FLGamesError
from .orchestrator import (
    FIXED,
    PARALLEL,
    SEQUENTIAL,
    VARIABLE,
    GameConfig,
    RoundLog,
    run_fedavg_baseline,
    run_fedsgd_baseline,
    run_training,
)

CSV_SCHEMA = "flgames-rounds v1"
CSV_COLUMNS = ("round", "predictor_round", "acting", "train_acc", "test_acc", "phi_round", "comm_rounds")
CURVES_COLUMNS = ("round", "metric", "value", "variant", "seed")

SYNTHETIC = "synthetic-sem"
COLORED_MNIST = "colored-mnist"
COLORED_FASHION = "colored-fashion"
CIFAR_PATCH = "spurious-cifar-patch"
MULTICLASS_MNIST = "multiclass-mnist"
MULTICLASS_FASHION = "multiclass-fashion"
DATASETS = (SYNTHETIC, COLORED_MNIST, COLORED_FASHION, CIFAR_PATCH, MULTICLASS_MNIST, MULTICLASS_FASHION)

GAME = "game"
FEDAVG = "fedavg"
FEDSGD = "fedsgd"

# short variant tags accepted by --variant and sweep.variants
VARIANT_PRESETS = {
    "F": dict(variant_phi=FIXED, smooth=False, fast_phi=False),
    "F-smooth": dict(variant_phi=FIXED, smooth=True, fast_phi=False),
    "V": dict(variant_phi=VARIABLE, smooth=False, fast_phi=False),
    "V-smooth": dict(variant_phi=VARIABLE, smooth=True, fast_phi=False),
    "V-fast": dict(variant_phi=VARIABLE, smooth=False, fast_phi=True),
    "V-smooth-fast": dict(variant_phi=VARIABLE, smooth=True, fast_phi=True),
}
TABLE_VARIANTS = ("F", "F-smooth", "V", "V-smooth-fast")

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def repeat_seeds(master: int, repeat: int) -> list[int]:
    if repeat < 1:
        raise ConfigError("repeat must be >= 1")
    return [splitmix64((master + i) & _MASK64) for i in range(repeat)]


# ------------------------------------------------------------------ config


@dataclass
class SemOptions:
    d_noise: int = 5
    causal_dim: int = 5
    spurious_dim: int = 5
    causal_noise: float = 0.0


@dataclass
class SweepOptions:
    n_clients: tuple[int, ...] = ()
    schedules: tuple[str, ...] = ()
    variants: tuple[str, ...] = ()
    baselines: tuple[str, ...] = ()


@dataclass
class ExperimentConfig:
    dataset: str = SYNTHETIC
    data_root: Optional[str] = None
    n_clients: int = 2
    n_classes: int = 2
    n_train: int = 40000
    n_test: int = 10000
    downsample: int = 2
    delta: float = 0.25
    p_test: float = 0.9
    repeat: int = 1
    seed: int = 0
    out_dir: str = "runs"
    method: str = GAME
    baseline_rounds: int = 20
    fedavg_epochs: int = 1
    oscillation_window: int = 200
    data_seed: Optional[int] = None
    game: GameConfig = field(default_factory=GameConfig)
    sem: SemOptions = field(default_factory=SemOptions)
    sweep: SweepOptions = field(default_factory=SweepOptions)

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; choose from {', '.join(DATASETS)}")
        if self.repeat < 1:
            raise ConfigError("repeat must be >= 1")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if self.method not in (GAME, FEDAVG, FEDSGD):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.oscillation_window < 2:
            raise ConfigError("oscillation_window must be >= 2")
        if self.dataset != SYNTHETIC:
            root = Path(self.resolved_root())
            if not root.is_dir():
                raise ConfigError(f"data root {root} does not exist")

    def resolved_root(self) -> str:
        return self.data_root or os.environ.get(dg.DATA_ROOT_ENV, "data")

    def seeds(self) -> list[int]:
        return repeat_seeds(self.seed, self.repeat)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


REQUIRED_KEYS = ("dataset",)
_SECTIONS = {"game": GameConfig, "sem": SemOptions, "sweep": SweepOptions}


def _strip_optional(tp):
    if typing.get_origin(tp) is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _coerce(key: str, raw: str, tp):
    tp, optional = _strip_optional(tp)
    text = raw.strip()
    if optional and text.lower() in ("none", "null", ""):
        return None
    try:
        if typing.get_origin(tp) is tuple:
            (inner, *_rest) = typing.get_args(tp)
            return tuple(_coerce(key, part, inner) for part in text.split(",") if part.strip())
        if tp is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw.strip()!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def parse_config_text(text: str) -> ExperimentConfig:
    """Read ``key = value`` lines; ``game.``, ``sem.`` and ``sweep.`` prefixes address sections."""
    top_hints = typing.get_type_hints(ExperimentConfig)
    values: dict[str, dict] = {"": {}, **{s: {} for s in _SECTIONS}}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        section, _, name = key.rpartition(".")
        if section:
            if section not in _SECTIONS:
                raise ConfigError(f"unknown key {key!r}")
            hints = typing.get_type_hints(_SECTIONS[section])
        else:
            hints = {k: v for k, v in top_hints.items() if k not in _SECTIONS}
        if name not in hints:
            raise ConfigError(f"unknown key {key!r}")
        values[section][name] = _coerce(key, raw, hints[name])
    missing = [k for k in REQUIRED_KEYS if k not in values[""]]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    kwargs = dict(values[""])
    for section, cls in _SECTIONS.items():
        kwargs[section] = cls(**values[section])
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def apply_variant(game: GameConfig, tag: str) -> GameConfig:
    if tag not in VARIANT_PRESETS:
        raise ConfigError(f"unknown variant {tag!r}; choose from {', '.join(VARIANT_PRESETS)}")
    return dataclasses.replace(game, **VARIANT_PRESETS[tag])


# ------------------------------------------------------------------- data


def _raw_pair(cfg: ExperimentConfig, fashion: bool):
    root = cfg.resolved_root()
    found = dg.find_mnist_files(root, "train"), dg.find_mnist_files(root, "t10k")
    if None in found:
        kind = "Fashion-MNIST" if fashion else "MNIST"
        raise ConfigError(f"{kind} IDX files not found under {root}")
    return dg.load_idx_files(*found[0]), dg.load_idx_files(*found[1])


def _cifar_pair(cfg: ExperimentConfig):
    root = Path(cfg.resolved_root())
    train_files = sorted(root.glob("data_batch_*.bin"))
    test_file = root / "test_batch.bin"
    if not train_files or not test_file.exists():
        raise ConfigError(f"CIFAR-10 binary batches not found under {root}")
    parts = [dg.parse_cifar10_binary(p.read_bytes()) for p in train_files]
    train = dg.RawImageSet(
        np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts])
    )
    return train, dg.parse_cifar10_binary(test_file.read_bytes())


def build_datasets(cfg: ExperimentConfig, n_clients: int, seed: int):
    """Train clients and the test client for one run."""
    if n_clients == 2:
        # the standard two-client benchmark uses its own p values, not the spaced ladder
        specs = dg.standard_specs(cfg.n_train, cfg.n_test)
        specs = [dataclasses.replace(s, delta=cfg.delta) for s in specs]
        specs[-1] = dataclasses.replace(specs[-1], p_spurious=cfg.p_test)
    else:
        specs = dg.make_client_specs(
            n_clients, delta=cfg.delta, p_test=cfg.p_test, n_train_total=cfg.n_train, n_test=cfg.n_test
        )
    if cfg.dataset == SYNTHETIC:
        sem = cfg.sem
        return dg.synth_federation(
            specs, seed, d_noise=sem.d_noise, causal_dim=sem.causal_dim,
            spurious_dim=sem.spurious_dim, causal_noise=sem.causal_noise,
        )
    if cfg.dataset in (COLORED_MNIST, MULTICLASS_MNIST, COLORED_FASHION, MULTICLASS_FASHION):
        fashion = cfg.dataset in (COLORED_FASHION, MULTICLASS_FASHION)
        train_raw, test_raw = _raw_pair(cfg, fashion)
        if cfg.dataset in (MULTICLASS_MNIST, MULTICLASS_FASHION):
            keep_tr, keep_te = train_raw.labels < cfg.n_classes, test_raw.labels < cfg.n_classes
            train_raw = dg.RawImageSet(train_raw.images[keep_tr], train_raw.labels[keep_tr])
            test_raw = dg.RawImageSet(test_raw.images[keep_te], test_raw.labels[keep_te])
            return dg.build_federation(
                train_raw, test_raw, specs, None, seed, "palette", cfg.n_classes, cfg.downsample
            )
        rule = dg.FASHION_BINARY_RULE if fashion else dg.MNIST_BINARY_RULE
        return dg.build_federation(train_raw, test_raw, specs, rule, seed, "color", 2, cfg.downsample)
    train_raw, test_raw = _cifar_pair(cfg)
    return dg.build_federation(train_raw, test_raw, specs, dg.CIFAR10_BINARY_RULE, seed, "patch", 2, 1)


# ---------------------------------------------------------------- metrics


def oscillation_metrics(series: Sequence[float], window: int) -> tuple[float, float]:
    """Sign-change rate of first differences over the trailing window, and mean gap between changes.

    Zero differences carry no direction and are skipped; a change is located at
    the difference where the new direction first appears.
    """
    values = np.asarray(series, dtype=np.float64)
    if window < 2:
        raise ConfigError("window must be >= 2")
    if values.size <= window:
        raise ConfigError(f"series of length {values.size} is too short for window {window}")
    diffs = np.diff(values[-(window + 1):])
    signs = np.sign(diffs)
    nz = np.flatnonzero(signs)
    change_at = [int(j) for i, j in zip(nz[:-1], nz[1:]) if signs[i] != signs[j]]
    frequency = len(change_at) / (window - 1)
    interval = float(np.mean(np.diff(change_at))) if len(change_at) >= 2 else 0.0
    return frequency, interval


@dataclass
class RunRecord:
    seed: int
    final_train_acc: float
    final_test_acc: float
    rounds: int
    predictor_rounds: int
    comm_rounds: int
    stopped: bool
    rounds_to_stop: Optional[int]
    oscillation_frequency: Optional[float]
    oscillation_interval: Optional[float]


@dataclass
class MetricsSummary:
    variant: str
    n_runs: int
    train_mean: float
    train_std: float
    test_mean: float
    test_std: float
    rounds_to_stop_mean: Optional[float]
    stopped_runs: int
    oscillation_frequency: Optional[float]
    oscillation_interval: Optional[float]
    runs: list[RunRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def record_from_logs(logs: Sequence[RoundLog], seed: int, stopped: bool, window: int) -> RunRecord:
    """Everything a summary needs, derived from the per-round records alone."""
    if not logs:
        raise FLGamesError("a run produced no rounds")
    pred = [lg.train_acc for lg in logs if not lg.phi_round]
    freq = interval = None
    if len(pred) > window:
        freq, interval = oscillation_metrics(pred, window)
    last = logs[-1]
    return RunRecord(
        seed=seed,
        final_train_acc=last.train_acc,
        final_test_acc=last.test_acc,
        rounds=last.round,
        predictor_rounds=last.predictor_round,
        comm_rounds=last.comm_rounds,
        stopped=stopped,
        rounds_to_stop=last.predictor_round if stopped else None,
        oscillation_frequency=freq,
        oscillation_interval=interval,
    )


def summarize(variant: str, runs: Sequence[RunRecord]) -> MetricsSummary:
    if not runs:
        raise FLGamesError("no completed runs to summarize")
    tr = np.array([r.final_train_acc for r in runs])
    te = np.array([r.final_test_acc for r in runs])
    stops = [r.rounds_to_stop for r in runs if r.rounds_to_stop is not None]
    freqs = [r.oscillation_frequency for r in runs if r.oscillation_frequency is not None]
    gaps = [r.oscillation_interval for r in runs if r.oscillation_interval is not None]
    return MetricsSummary(
        variant=variant,
        n_runs=len(runs),
        train_mean=float(tr.mean()),
        train_std=float(tr.std()),
        test_mean=float(te.mean()),
        test_std=float(te.std()),
        rounds_to_stop_mean=float(np.mean(stops)) if stops else None,
        stopped_runs=len(stops),
        oscillation_frequency=float(np.mean(freqs)) if freqs else None,
        oscillation_interval=float(np.mean(gaps)) if gaps else None,
        runs=list(runs),
    )


# -------------------------------------------------------------- log files


def _fmt(x: float) -> str:
    return repr(float(x))


def write_rounds_csv(path, logs: Sequence[RoundLog], n_clients: int) -> None:
    buf = io.StringIO()
    buf.write(f"# {CSV_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS + tuple(f"loss_{k}" for k in range(1, n_clients + 1)))
    for lg in logs:
        losses = list(lg.losses) + [float("nan")] * (n_clients - len(lg.losses))
        w.writerow([
            lg.round, lg.predictor_round, ";".join(str(a) for a in lg.acting),
            _fmt(lg.train_acc), _fmt(lg.test_acc), int(lg.phi_round), lg.comm_rounds,
            *(_fmt(v) for v in losses[:n_clients]),
        ])
    Path(path).write_text(buf.getvalue())


def read_rounds_csv(path) -> list[RoundLog]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# {CSV_SCHEMA}":
        raise dg.FormatError(f"{path}: missing or unknown schema header")
    rows = list(csv.reader(lines[1:]))
    header, body = rows[0], rows[1:]
    if tuple(header[: len(CSV_COLUMNS)]) != CSV_COLUMNS:
        raise dg.FormatError(f"{path}: unexpected columns {header}")
    out = []
    for r in body:
        out.append(RoundLog(
            round=int(r[0]), predictor_round=int(r[1]),
            phi_round=bool(int(r[5])),
            acting=tuple(int(a) for a in r[2].split(";") if a),
            train_acc=float(r[3]), test_acc=float(r[4]),
            losses=tuple(float(v) for v in r[len(CSV_COLUMNS):]),
            comm_rounds=int(r[6]),
        ))
    return out


def curve_rows(logs: Sequence[RoundLog], variant: str, seed: int) -> list[tuple]:
    rows = []
    for lg in logs:
        rows.append((lg.round, "train_acc", _fmt(lg.train_acc), variant, seed))
        rows.append((lg.round, "test_acc", _fmt(lg.test_acc), variant, seed))
    return rows


def write_curves_csv(path, rows: Sequence[tuple]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVES_COLUMNS)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def dump_json(path, payload) -> None:
    Path(path).write_text(json.dumps(_json_safe(payload), indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------- runs


@dataclass
class CellResult:
    label: str
    n_clients: int
    summary: MetricsSummary
    logs: dict[int, list[RoundLog]]


def _variant_label(cfg: ExperimentConfig) -> str:
    if cfg.method == FEDAVG:
        return "FedAVG"
    if cfg.method == FEDSGD:
        return "FedSGD"
    return cfg.game.name


def run_single(cfg: ExperimentConfig, seed: int, n_clients: Optional[int] = None):
    """One repeat. Returns (logs, stopped)."""
    n = n_clients or cfg.n_clients
    data_seed = seed if cfg.data_seed is None else cfg.data_seed
    train, test = build_datasets(cfg, n, data_seed)
    if cfg.method == FEDAVG:
        res = run_fedavg_baseline(train, test, cfg.game, seed, cfg.fedavg_epochs, cfg.baseline_rounds)
        return res.logs, False
    if cfg.method == FEDSGD:
        res = run_fedsgd_baseline(train, test, cfg.game, seed, cfg.baseline_rounds)
        return res.logs, False
    res = run_training(train, test, cfg.game, seed)
    return res.logs, res.stopped


def run_cell(cfg: ExperimentConfig, out_dir, threads: int = 1, n_clients: Optional[int] = None) -> CellResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = n_clients or cfg.n_clients
    label = _variant_label(cfg)
    seeds = cfg.seeds()

    def job(seed):
        try:
            return run_single(cfg, seed, n)
        except Exception as exc:
            raise FLGamesError(f"run with seed {seed} failed: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(job, seeds))
    else:
        results = [job(s) for s in seeds]
    # aggregation happens only after every repeat has finished
    records, curves, all_logs = [], [], {}
    for seed, (logs, stopped) in zip(seeds, results):
        write_rounds_csv(out / f"rounds_{seed}.csv", logs, n)
        records.append(record_from_logs(logs, seed, stopped, cfg.oscillation_window))
        curves.extend(curve_rows(logs, label, seed))
        all_logs[seed] = logs
    summary = summarize(label, records)
    write_curves_csv(out / "curves.csv", curves)
    dump_json(out / "summary.json", {"config": cfg.to_dict(), "n_clients": n, "summary": summary.to_dict()})
    return CellResult(label, n, summary, all_logs)


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> MetricsSummary:
    return run_cell(cfg, out_dir or cfg.out_dir, threads).summary


def sweep_cells(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig, int]]:
    """Expand the sweep section into (directory name, config, n_clients) cells."""
    sw = cfg.sweep
    clients = sw.n_clients or (cfg.n_clients,)
    schedules = sw.schedules or (cfg.game.schedule,)
    variants = sw.variants or (None,)
    cells = []
    for n in clients:
        for sched in schedules:
            for tag in variants:
                game = dataclasses.replace(cfg.game, schedule=sched)
                if tag is not None:
                    game = apply_variant(game, tag)
                name = f"n{n}_{sched}_{tag or 'base'}"
                cells.append((name, dataclasses.replace(cfg, game=game, method=GAME), n))
        for b in sw.baselines:
            if b not in (FEDAVG, FEDSGD):
                raise ConfigError(f"unknown baseline {b!r}")
            cells.append((f"n{n}_{b}", dataclasses.replace(cfg, method=b), n))
    return cells


def run_sweep(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> list[CellResult]:
    root = Path(out_dir or cfg.out_dir)
    results = []
    for name, cell_cfg, n in sweep_cells(cfg):
        results.append(run_cell(cell_cfg, root / name, threads, n))
    table = [
        {"cell": name, "n_clients": r.n_clients, "variant": r.label,
         "schedule": c.game.schedule if c.method == GAME else None,
         **{k: v for k, v in r.summary.to_dict().items() if k != "runs"}}
        for (name, c, _), r in zip(sweep_cells(cfg), results)
    ]
    dump_json(root / "sweep.json", table)
    write_sweep_csv(root / "sweep.csv", table)
    return results


def write_sweep_csv(path, table: Sequence[dict]) -> None:
    cols = ["cell", "n_clients", "schedule", "variant", "train_mean", "train_std", "test_mean",
            "test_std", "rounds_to_stop_mean", "stopped_runs", "oscillation_frequency"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in table:
        w.writerow(["" if row.get(c) is None else row.get(c) for c in cols])
    Path(path).write_text(buf.getvalue())


def table_grid(cfg: ExperimentConfig) -> ExperimentConfig:
    """The eight game variants (four per schedule) plus both baselines."""
    sweep = SweepOptions(
        n_clients=(cfg.n_clients,), schedules=(SEQUENTIAL, PARALLEL),
        variants=TABLE_VARIANTS, baselines=(FEDAVG, FEDSGD),
    )
    return dataclasses.replace(cfg, sweep=sweep)


def generate_data(cfg: ExperimentConfig, out_dir=None) -> list[Path]:
    """Materialise the datasets of the first repeat seed as flat binary caches."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds()[0] if cfg.data_seed is None else cfg.data_seed
    train, test = build_datasets(cfg, cfg.n_clients, seed)
    paths = []
    for ds in [*train, test]:
        p = out / f"{ds.spec.role}_{ds.spec.client_id}.flgd"
        dg.save_dataset(ds, p)
        paths.append(p)
    return paths
