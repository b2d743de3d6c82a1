"""Spurious-correlation federated datasets.

Label pipeline shared by every generator::

    preliminary label y~  --(flip w.p. delta)-->  label y  --(flip w.p. p)-->  spurious code z

The spurious code is then rendered into the input: a colour channel
(coloured MNIST / Fashion-MNIST), the corner of a black patch (CIFAR-10),
a palette colour (multi-class) or a block of synthetic features.
"""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, LengthError, RuleError, ShapeError, SizeError

TRAIN = "train"
TEST = "test"

IDX_UBYTE_3D = 0x00000803
IDX_UBYTE_1D = 0x00000801

# class index -> preliminary label, None = drop the sample
MNIST_BINARY_RULE: dict[int, Optional[int]] = {d: int(d >= 5) for d in range(10)}
FASHION_CLASSES = (
    "t-shirt", "trouser", "pullover", "dress", "coat",
    "sandal", "shirt", "sneaker", "bag", "ankle boot",
)
FASHION_BINARY_RULE: dict[int, Optional[int]] = {
    0: 0, 1: 0, 2: 0, 3: 0, 4: 0, 6: 0,
    5: 1, 7: 1, 9: 1,
    8: 1,  # bag sits under the footwear umbrella
}
CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
CIFAR10_BINARY_RULE: dict[int, Optional[int]] = {
    0: 0, 1: 0, 8: 0, 9: 0,
    2: 1, 3: 1, 4: 1, 5: 1, 7: 1,
    6: None,
}

DATA_ROOT_ENV = "FLGAMES_DATA_ROOT"


@dataclass(frozen=True)
class EnvSpec:
    client_id: int
    delta: float
    p_spurious: float
    n_samples: int
    role: str = TRAIN

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError(f"delta must be in [0, 1], got {self.delta}")
        if not 0.0 <= self.p_spurious <= 1.0:
            raise ConfigError(f"p_spurious must be in [0, 1], got {self.p_spurious}")
        if self.n_samples <= 0:
            raise ConfigError(f"n_samples must be positive, got {self.n_samples}")
        if self.role not in (TRAIN, TEST):
            raise ConfigError(f"role must be 'train' or 'test', got {self.role!r}")


@dataclass
class SpuriousDataset:
    inputs: np.ndarray
    labels: np.ndarray
    spurious: np.ndarray
    clean_labels: np.ndarray
    spec: EnvSpec
    num_classes: int = 2

    def __post_init__(self):
        n = self.inputs.shape[0]
        if not (len(self.labels) == len(self.spurious) == len(self.clean_labels) == n):
            raise ShapeError("inputs, labels, spurious codes and clean labels differ in length")
        for name, arr in (("labels", self.labels), ("spurious", self.spurious)):
            if n and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise ShapeError(f"{name} must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx: np.ndarray) -> "SpuriousDataset":
        return replace(
            self,
            inputs=self.inputs[idx],
            labels=self.labels[idx],
            spurious=self.spurious[idx],
            clean_labels=self.clean_labels[idx],
        )


@dataclass
class RawImageSet:
    images: np.ndarray  # (n, H, W) or (n, H, W, C) uint8
    labels: np.ndarray  # (n,) uint8

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )


# ---------------------------------------------------------------- IDX parsing


def _parse_idx_array(data: bytes, expected_magic: int, ndim: int) -> np.ndarray:
    if len(data) < 4:
        raise FormatError("IDX stream shorter than its magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(f"IDX magic {magic:#010x}, expected {expected_magic:#010x}")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise LengthError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    expected = math.prod(dims)
    payload = len(data) - header_len
    if payload != expected:
        raise LengthError(f"IDX payload has {payload} bytes, header declares {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=header_len).reshape(dims)


def parse_idx(image_bytes: bytes, label_bytes: bytes) -> RawImageSet:
    """Decode an IDX image file (0x803) and its label file (0x801)."""
    images = _parse_idx_array(image_bytes, IDX_UBYTE_3D, 3)
    labels = _parse_idx_array(label_bytes, IDX_UBYTE_1D, 1)
    return RawImageSet(images, labels)


def _read_maybe_gzip(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_idx_files(image_path, label_path) -> RawImageSet:
    return parse_idx(_read_maybe_gzip(Path(image_path)), _read_maybe_gzip(Path(label_path)))


def find_mnist_files(root=None, prefix: str = "train") -> Optional[tuple[Path, Path]]:
    """Locate ``{prefix}-images-idx3-ubyte[.gz]`` and its label file under ``root``."""
    root = Path(root or os.environ.get(DATA_ROOT_ENV, "data"))
    for suffix in ("", ".gz"):
        img = root / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = root / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return img, lab
    return None


def parse_cifar10_binary(data: bytes) -> RawImageSet:
    """CIFAR-10 binary batches: records of 1 label byte + 3072 CHW pixel bytes."""
    rec = 1 + 3 * 32 * 32
    if len(data) % rec:
        raise LengthError(f"CIFAR-10 stream length {len(data)} is not a multiple of {rec}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(-1, rec)
    images = arr[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return RawImageSet(np.ascontiguousarray(images), arr[:, 0].copy())


# ------------------------------------------------------------- label pipeline


def binarize_labels(
    raw: RawImageSet, rule: Mapping[int, Optional[int]]
) -> tuple[np.ndarray, np.ndarray]:
    """Map raw classes through ``rule``.

    Returns (kept indices, preliminary labels). Classes mapped to ``None``
    are dropped; classes absent from the rule are an error.
    """
    classes = np.unique(raw.labels)
    missing = [int(c) for c in classes if int(c) not in rule]
    if missing:
        raise RuleError(f"classes {missing} are neither mapped nor dropped")
    lut = np.full(256, -1, dtype=np.int64)
    for cls, target in rule.items():
        if target is not None:
            lut[cls] = target
    mapped = lut[raw.labels]
    keep = np.flatnonzero(mapped >= 0)
    return keep, mapped[keep]


def _flip(labels: np.ndarray, prob: float, rng: np.random.Generator, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    flip = rng.random(labels.shape[0]) < prob
    if num_classes == 2:
        return np.where(flip, 1 - labels, labels)
    # re-draw uniformly among the other C-1 classes
    shift = rng.integers(1, num_classes, size=labels.shape[0])
    return np.where(flip, (labels + shift) % num_classes, labels)


def apply_label_noise(
    labels: np.ndarray, delta: float, rng_seed, num_classes: int = 2
) -> np.ndarray:
    return _flip(labels, delta, np.random.default_rng(rng_seed), num_classes)


def assign_spurious_code(
    labels: np.ndarray, p_spurious: float, rng_seed, num_classes: int = 2
) -> np.ndarray:
    return _flip(labels, p_spurious, np.random.default_rng(rng_seed), num_classes)


def multiclass_colorize(
    labels: np.ndarray, p_spurious: float, num_classes: int, role: str, rng_seed
) -> np.ndarray:
    """Colour index per sample: own class colour w.p. 1 - p, else the next class's.

    The same law serves both roles; a test environment simply carries a
    large ``p_spurious`` so that class k mostly wears colour k + 1.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if role not in (TRAIN, TEST):
        raise ConfigError(f"role must be 'train' or 'test', got {role!r}")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(rng_seed)
    shifted = rng.random(labels.shape[0]) < p_spurious
    return np.where(shifted, (labels + 1) % num_classes, labels)


# ------------------------------------------------------------------ rendering


def render_color(image: np.ndarray, z: int) -> np.ndarray:
    """Two-channel image (channel 0 green, channel 1 red) flattened to [0, 1].

    The grayscale pixels go into channel ``z``; the other channel is zero.
    """
    if z not in (0, 1):
        raise ConfigError(f"binary colour code must be 0 or 1, got {z}")
    gray = np.asarray(image, dtype=np.float64) / 255.0
    out = np.zeros((2,) + gray.shape)
    out[z] = gray
    return out.ravel()


def palette(num_classes: int) -> np.ndarray:
    """Channel pattern per colour: the binary code of (c + 1) over ceil(log2 C) + 1 bits.

    At C = 2 this is the one-hot green/red layout of :func:`render_color`.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    n_channels = math.ceil(math.log2(num_classes)) + 1
    codes = np.arange(1, num_classes + 1)
    return ((codes[:, None] >> np.arange(n_channels)) & 1).astype(np.float64)


def render_palette(images: np.ndarray, colors: np.ndarray, num_classes: int) -> np.ndarray:
    """Batch version of colouring: (n, H, W) uint8 -> (n, channels*H*W) in [0, 1]."""
    pal = palette(num_classes)
    gray = np.asarray(images, dtype=np.float64) / 255.0
    n = gray.shape[0]
    out = pal[colors][:, :, None] * gray.reshape(n, 1, -1)
    return out.reshape(n, -1)


def render_patch(image: np.ndarray, z: int, patch: int = 5) -> np.ndarray:
    """Zero a patch x patch square: top-left corner for z=0, top-right for z=1."""
    if z not in (0, 1):
        raise ConfigError(f"patch code must be 0 or 1, got {z}")
    img = np.array(image, copy=True)
    h, w = img.shape[:2]
    if h < patch or w < patch:
        raise SizeError(f"image {h}x{w} is smaller than the {patch}x{patch} patch")
    if z == 0:
        img[:patch, :patch] = 0
    else:
        img[:patch, w - patch :] = 0
    return img


# ----------------------------------------------------------- client layouts


def make_client_specs(
    n_clients: int,
    p_min: float = 0.1,
    p_max: float = 0.3,
    delta: float = 0.25,
    p_test: float = 0.9,
    n_train_total: int = 60000,
    n_test: int = 10000,
    sizes: Optional[Sequence[int]] = None,
) -> list[EnvSpec]:
    """Train specs with p evenly spaced from p_max down to p_min, then one test spec.

    ``sizes`` gives explicit (uneven) per-client sample counts; otherwise the
    training pool is split as evenly as possible, remainder to the first clients.
    """
    if n_clients < 1:
        raise ConfigError("need at least one training client")
    if n_clients == 1:
        ps = [p_max]
    else:
        step = (p_max - p_min) / (n_clients - 1)
        ps = [round(p_max - i * step, 12) for i in range(n_clients)]
    if sizes is None:
        base, rem = divmod(n_train_total, n_clients)
        sizes = [base + (i < rem) for i in range(n_clients)]
    elif len(sizes) != n_clients:
        raise ConfigError(f"{len(sizes)} sizes given for {n_clients} clients")
    specs = [EnvSpec(i + 1, delta, p, int(n)) for i, (p, n) in enumerate(zip(ps, sizes))]
    specs.append(EnvSpec(n_clients + 1, delta, p_test, n_test, TEST))
    return specs


def standard_specs(n_train_total: int = 60000, n_test: int = 10000) -> list[EnvSpec]:
    """The two-client benchmark: p = (0.2, 0.1), test p = 0.9, delta = 0.25."""
    return make_client_specs(2, 0.1, 0.2, 0.25, 0.9, n_train_total, n_test)


def partition_pool(n_total: int, sizes: Sequence[int], seed) -> list[np.ndarray]:
    """Disjoint index sets of the requested sizes that together exhaust the pool."""
    if sum(sizes) != n_total:
        raise ConfigError(f"client sizes sum to {sum(sizes)}, pool holds {n_total}")
    perm = np.random.default_rng(seed).permutation(n_total)
    bounds = np.cumsum([0, *sizes])
    return [np.sort(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def split_weights(counts: Sequence[int]) -> list[Fraction]:
    total = sum(counts)
    return [Fraction(c, total) for c in counts]


# ------------------------------------------------------------ generators


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _streams(seed, n: int) -> list[np.random.Generator]:
    ss = _seed_sequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def synth_sem_generate(
    spec: EnvSpec,
    d_noise: int = 5,
    rng_seed=0,
    causal_dim: int = 5,
    spurious_dim: int = 5,
    causal_noise: float = 0.0,
) -> SpuriousDataset:
    """Synthetic stand-in for coloured MNIST with the same causal graph.

    Features are [causal block | spurious block | noise block], all in [0, 1].
    The causal block repeats the preliminary label y~ (optionally blurred by
    uniform jitter of width ``causal_noise``); the spurious block repeats the
    code z; noise dims are uniform.
    """
    if d_noise < 0:
        raise ConfigError("d_noise must be non-negative")
    s_clean, s_noise, s_spur, s_feat = _streams(rng_seed, 4)
    n = spec.n_samples
    clean = s_clean.integers(0, 2, size=n)
    y = _flip(clean, spec.delta, s_noise, 2)
    z = _flip(y, spec.p_spurious, s_spur, 2)
    causal = np.repeat(clean[:, None].astype(np.float64), causal_dim, axis=1)
    if causal_noise > 0:
        jitter = s_feat.uniform(0.0, causal_noise, size=causal.shape)
        causal = np.abs(causal - jitter)
    spur = np.repeat(z[:, None].astype(np.float64), spurious_dim, axis=1)
    noise = s_feat.random((n, d_noise))
    x = np.hstack([causal, spur, noise])
    return SpuriousDataset(x, y, z, clean, spec, 2)


def make_image_dataset(
    images: np.ndarray,
    clean_labels: np.ndarray,
    spec: EnvSpec,
    rng_seed,
    mechanism: str = "color",
    num_classes: int = 2,
    downsample: int = 1,
) -> SpuriousDataset:
    """Apply label noise and a spurious mechanism to a block of grayscale/RGB images.

    mechanism: "color" (2-channel), "patch" (black 5x5 corner), "palette" (multi-class colour).
    """
    s_noise, s_spur = _streams(rng_seed, 2)
    y = _flip(clean_labels, spec.delta, s_noise, num_classes)
    if mechanism == "palette":
        z = np.where(s_spur.random(len(y)) < spec.p_spurious, (y + 1) % num_classes, y)
    else:
        z = _flip(y, spec.p_spurious, s_spur, num_classes)
    imgs = images[:, ::downsample, ::downsample] if downsample > 1 else images
    n = imgs.shape[0]
    if mechanism == "color":
        if num_classes != 2:
            raise ConfigError("two-channel colouring is binary; use 'palette'")
        gray = imgs.astype(np.float64).reshape(n, -1) / 255.0
        x = np.zeros((n, 2, gray.shape[1]))
        x[np.arange(n), z] = gray
        x = x.reshape(n, -1)
    elif mechanism == "palette":
        x = render_palette(imgs, z, num_classes)
    elif mechanism == "patch":
        x = np.stack([render_patch(img, int(c)) for img, c in zip(imgs, z)])
        x = x.astype(np.float64).reshape(n, -1) / 255.0
    else:
        raise ConfigError(f"unknown spurious mechanism {mechanism!r}")
    return SpuriousDataset(x, y, z, np.asarray(clean_labels, dtype=np.int64), spec, num_classes)


def build_federation(
    train: RawImageSet,
    test: RawImageSet,
    specs: Sequence[EnvSpec],
    rule: Optional[Mapping[int, Optional[int]]],
    rng_seed,
    mechanism: str = "color",
    num_classes: int = 2,
    downsample: int = 1,
) -> tuple[list[SpuriousDataset], SpuriousDataset]:
    """Split a raw training pool across the train specs and build the test client.

    ``rule=None`` keeps raw class indices (multi-class variants).
    """
    train_specs = [s for s in specs if s.role == TRAIN]
    test_specs = [s for s in specs if s.role == TEST]
    if len(test_specs) != 1 or not train_specs:
        raise ConfigError("need at least one train spec and exactly one test spec")

    def prep(raw: RawImageSet):
        if rule is None:
            idx = np.arange(len(raw.labels))
            lab = raw.labels.astype(np.int64)
            if num_classes < 10:
                keep = lab < num_classes
                idx, lab = idx[keep], lab[keep]
            return raw.images[idx], lab
        idx, lab = binarize_labels(raw, rule)
        return raw.images[idx], lab

    tr_img, tr_lab = prep(train)
    te_img, te_lab = prep(test)
    sizes = [s.n_samples for s in train_specs]
    if sum(sizes) != len(tr_lab):
        # rescale the even split to what survived class filtering
        base, rem = divmod(len(tr_lab), len(sizes))
        sizes = [base + (i < rem) for i in range(len(sizes))]
        train_specs = [replace(s, n_samples=n) for s, n in zip(train_specs, sizes)]
    streams = _seed_sequence(rng_seed).spawn(len(train_specs) + 2)
    parts = partition_pool(len(tr_lab), sizes, streams[0])
    clients = [
        make_image_dataset(tr_img[idx], tr_lab[idx], s, streams[i + 1], mechanism, num_classes, downsample)
        for i, (s, idx) in enumerate(zip(train_specs, parts))
    ]
    tspec = replace(test_specs[0], n_samples=len(te_lab))
    test_ds = make_image_dataset(te_img, te_lab, tspec, streams[-1], mechanism, num_classes, downsample)
    return clients, test_ds


def synth_federation(
    specs: Sequence[EnvSpec], rng_seed, d_noise: int = 5, **kw
) -> tuple[list[SpuriousDataset], SpuriousDataset]:
    streams = _seed_sequence(rng_seed).spawn(len(specs))
    data = [synth_sem_generate(s, d_noise, st, **kw) for s, st in zip(specs, streams)]
    train = [d for d in data if d.spec.role == TRAIN]
    test = [d for d in data if d.spec.role == TEST]
    if len(test) != 1 or not train:
        raise ConfigError("need at least one train spec and exactly one test spec")
    return train, test[0]


# --------------------------------------------------------------- flat cache

_CACHE_MAGIC = b"FLGD"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIQII")  # magic, version, n, d, num_classes


def save_dataset(ds: SpuriousDataset, path) -> None:
    """Flat binary cache: header, row-major float64 inputs, then label/code/clean bytes."""
    n, d = ds.inputs.shape
    with open(path, "wb") as f:
        f.write(_CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, n, d, ds.num_classes))
        f.write(struct.pack("<Iddi", ds.spec.client_id, ds.spec.delta, ds.spec.p_spurious,
                            int(ds.spec.role == TEST)))
        f.write(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
        for arr in (ds.labels, ds.spurious, ds.clean_labels):
            f.write(np.asarray(arr, dtype=np.uint8).tobytes())


def load_dataset(path) -> SpuriousDataset:
    data = Path(path).read_bytes()
    hsize = _CACHE_HEADER.size
    if len(data) < hsize:
        raise LengthError("cache file shorter than its header")
    magic, version, n, d, c = _CACHE_HEADER.unpack_from(data)
    if magic != _CACHE_MAGIC or version != _CACHE_VERSION:
        raise FormatError(f"not a version-{_CACHE_VERSION} dataset cache")
    meta = struct.Struct("<Iddi")
    cid, delta, p, is_test = meta.unpack_from(data, hsize)
    pos = hsize + meta.size
    expected = pos + 8 * n * d + 3 * n
    if len(data) != expected:
        raise LengthError(f"cache holds {len(data)} bytes, header implies {expected}")
    x = np.frombuffer(data, dtype="<f8", count=n * d, offset=pos).reshape(n, d).astype(np.float64)
    pos += 8 * n * d
    cols = [np.frombuffer(data, dtype=np.uint8, count=n, offset=pos + i * n).astype(np.int64)
            for i in range(3)]
    spec = EnvSpec(cid, delta, p, max(int(n), 1), TEST if is_test else TRAIN)
    return SpuriousDataset(x, cols[0], cols[1], cols[2], spec, int(c))
