import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flgames import datagen as dg
from flgames.errors import ConfigError, FormatError, LengthError, RuleError, SizeError
from flgames.verify import binomial_band, dataset_rates


def idx_images(n, h, w, magic=0x803, fill=None):
    body = (np.arange(n * h * w) % 256).astype(np.uint8) if fill is None else fill
    return struct.pack(">IIII", magic, n, h, w) + bytes(body)


def idx_labels(labels, magic=0x801):
    return struct.pack(">II", magic, len(labels)) + bytes(np.asarray(labels, dtype=np.uint8))


def test_parse_idx_full_size_headers():
    raw = dg.parse_idx(idx_images(60000, 28, 28), idx_labels(np.arange(60000) % 10))
    assert raw.images.shape == (60000, 28, 28)
    assert raw.labels.shape == (60000,)
    raw = dg.parse_idx(idx_images(10000, 28, 28), idx_labels(np.arange(10000) % 10))
    assert len(raw.labels) == 10000


def test_parse_idx_bad_magic():
    with pytest.raises(FormatError, match="magic"):
        dg.parse_idx(idx_images(2, 3, 3, magic=0x802), idx_labels([0, 1]))


def test_parse_idx_truncated():
    data = idx_images(4, 3, 3)
    with pytest.raises(LengthError):
        dg.parse_idx(data[:-1], idx_labels([0, 1, 2, 3]))


def test_parse_idx_count_mismatch():
    with pytest.raises(Exception):
        dg.parse_idx(idx_images(4, 3, 3), idx_labels([0, 1, 2]))


def test_load_idx_gzip_and_find(tmp_path, monkeypatch):
    (tmp_path / "train-images-idx3-ubyte.gz").write_bytes(gzip.compress(idx_images(3, 2, 2)))
    (tmp_path / "train-labels-idx1-ubyte.gz").write_bytes(gzip.compress(idx_labels([1, 2, 3])))
    monkeypatch.setenv(dg.DATA_ROOT_ENV, str(tmp_path))
    found = dg.find_mnist_files(prefix="train")
    assert found is not None
    raw = dg.load_idx_files(*found)
    assert raw.labels.tolist() == [1, 2, 3]
    assert dg.find_mnist_files(prefix="t10k") is None


def test_cifar_binary_parser():
    rec = np.zeros((2, 3073), dtype=np.uint8)
    rec[:, 0] = [6, 3]
    rec[1, 1] = 200  # red channel, pixel (0, 0)
    raw = dg.parse_cifar10_binary(rec.tobytes())
    assert raw.images.shape == (2, 32, 32, 3)
    assert raw.images[1, 0, 0, 0] == 200
    with pytest.raises(LengthError):
        dg.parse_cifar10_binary(rec.tobytes()[:-1])


def test_binary_rules():
    raw = dg.RawImageSet(np.zeros((10, 2, 2), np.uint8), np.arange(10, dtype=np.uint8))
    _, lab = dg.binarize_labels(raw, dg.MNIST_BINARY_RULE)
    assert lab.tolist() == [0] * 5 + [1] * 5
    _, lab = dg.binarize_labels(raw, dg.FASHION_BINARY_RULE)
    assert lab.tolist() == [0, 0, 0, 0, 0, 1, 0, 1, 1, 1]
    keep, lab = dg.binarize_labels(raw, dg.CIFAR10_BINARY_RULE)
    assert 6 not in keep
    assert lab.tolist() == [0, 0, 1, 1, 1, 1, 1, 0, 0]


def test_binarize_unmapped_class():
    raw = dg.RawImageSet(np.zeros((2, 2, 2), np.uint8), np.array([0, 11], np.uint8))
    with pytest.raises(RuleError):
        dg.binarize_labels(raw, dg.MNIST_BINARY_RULE)


@pytest.mark.parametrize("rate", [0.25, 0.1, 0.9])
def test_noise_rates_at_100k(rate):
    clean = np.random.default_rng(0).integers(0, 2, 100_000)
    y = dg.apply_label_noise(clean, rate, 1)
    assert abs(np.mean(y != clean) - rate) < 0.005
    z = dg.assign_spurious_code(y, rate, 2)
    assert abs(np.mean(z != y) - rate) < 0.005


def test_multiclass_noise_stays_off_diagonal_uniform():
    clean = np.zeros(60_000, dtype=np.int64)
    y = dg.apply_label_noise(clean, 0.3, 4, num_classes=4)
    counts = np.bincount(y, minlength=4) / len(y)
    assert abs(counts[0] - 0.7) < 0.01
    np.testing.assert_allclose(counts[1:], 0.1, atol=0.01)


def test_multiclass_colorize_next_class():
    labels = np.arange(5).repeat(20_000)
    col = dg.multiclass_colorize(labels, 0.9, 5, dg.TEST, 0)
    moved = col != labels
    assert abs(moved.mean() - 0.9) < 0.005
    assert ((col[moved] - labels[moved]) % 5 == 1).all()
    with pytest.raises(ConfigError):
        dg.multiclass_colorize(labels, 0.1, 5, "val", 0)


def test_render_color_channels():
    img = np.full((2, 2), 255, dtype=np.uint8)
    red = dg.render_color(img, 1).reshape(2, 2, 2)
    assert red[1].sum() == 4 and red[0].sum() == 0
    green = dg.render_color(img, 0).reshape(2, 2, 2)
    assert green[0].sum() == 4 and green[1].sum() == 0
    with pytest.raises(ConfigError):
        dg.render_color(img, 2)


def test_render_patch_corners():
    img = np.full((8, 8), 255, dtype=np.uint8)
    left = dg.render_patch(img, 0)
    assert left[:5, :5].max() == 0 and left[:5, 5:].min() == 255
    right = dg.render_patch(img, 1)
    assert right[:5, 3:].max() == 0 and right[:5, :3].min() == 255
    assert right[5:].min() == 255
    with pytest.raises(SizeError):
        dg.render_patch(np.zeros((4, 4)), 0)


def test_palette_binary_matches_color_layout():
    np.testing.assert_array_equal(dg.palette(2), [[1, 0], [0, 1]])
    pal = dg.palette(10)
    assert pal.shape == (10, 5)
    assert len({tuple(r) for r in pal}) == 10


def test_client_specs_standard_and_ladder():
    std = dg.standard_specs(60000, 10000)
    assert [s.p_spurious for s in std] == [0.2, 0.1, 0.9]
    assert [s.n_samples for s in std] == [30000, 30000, 10000]
    assert [s.role for s in std] == [dg.TRAIN, dg.TRAIN, dg.TEST]
    three = dg.make_client_specs(3)
    assert [s.p_spurious for s in three[:3]] == [0.3, 0.2, 0.1]
    assert [s.n_samples for s in three[:3]] == [20000] * 3
    ten = dg.make_client_specs(10, n_train_total=60001)
    assert sum(s.n_samples for s in ten[:10]) == 60001
    assert ten[0].n_samples == 6001
    assert all(a.p_spurious > b.p_spurious for a, b in zip(ten[:9], ten[1:10]))


def test_envspec_validation():
    with pytest.raises(ConfigError):
        dg.EnvSpec(1, 1.5, 0.1, 10)
    with pytest.raises(ConfigError):
        dg.EnvSpec(1, 0.2, 0.1, 0)


def test_sem_blocks():
    spec = dg.EnvSpec(1, 0.25, 0.2, 5000)
    ds = dg.synth_sem_generate(spec, d_noise=3, rng_seed=4)
    assert ds.inputs.shape == (5000, 13)
    np.testing.assert_array_equal(ds.inputs[:, 0], ds.clean_labels)
    np.testing.assert_array_equal(ds.inputs[:, 5], ds.spurious)
    assert ds.inputs.min() >= 0 and ds.inputs.max() <= 1


def test_sem_is_seeded():
    spec = dg.EnvSpec(1, 0.25, 0.2, 500)
    a = dg.synth_sem_generate(spec, 2, 9)
    b = dg.synth_sem_generate(spec, 2, 9)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    c = dg.synth_sem_generate(spec, 2, 10)
    assert not np.array_equal(a.inputs, c.inputs)


def test_sem_statistics_within_three_sd():
    n = 100_000
    for spec in dg.standard_specs(2 * n, n):
        ds = dg.synth_sem_generate(spec, 1, spec.client_id)
        noise, spur = dataset_rates(ds)
        assert abs(noise - spec.delta) <= binomial_band(n, spec.delta)
        assert abs(spur - spec.p_spurious) <= binomial_band(n, spec.p_spurious)


def test_build_federation_splits_pool():
    rng = np.random.default_rng(0)
    train = dg.RawImageSet(rng.integers(0, 256, (1000, 4, 4), dtype=np.uint8), rng.integers(0, 10, 1000).astype(np.uint8))
    test = dg.RawImageSet(rng.integers(0, 256, (200, 4, 4), dtype=np.uint8), rng.integers(0, 10, 200).astype(np.uint8))
    clients, test_ds = dg.build_federation(train, test, dg.standard_specs(1000, 200), dg.MNIST_BINARY_RULE, 3)
    assert [len(c) for c in clients] == [500, 500]
    assert clients[0].dim == 32 and len(test_ds) == 200
    assert test_ds.spec.role == dg.TEST


def test_partition_pool_disjoint():
    parts = dg.partition_pool(10, [3, 7], 0)
    merged = np.sort(np.concatenate(parts))
    np.testing.assert_array_equal(merged, np.arange(10))
    with pytest.raises(ConfigError):
        dg.partition_pool(10, [3, 3], 0)


def test_split_weights_exact():
    assert [float(w) for w in dg.split_weights([1, 3])] == [0.25, 0.75]


def test_cache_round_trip(tmp_path):
    ds = dg.synth_sem_generate(dg.EnvSpec(2, 0.25, 0.1, 300), 2, 5)
    path = tmp_path / "c.flgd"
    dg.save_dataset(ds, path)
    back = dg.load_dataset(path)
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.spurious, ds.spurious)
    assert back.spec.p_spurious == 0.1 and back.spec.client_id == 2
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(LengthError):
        dg.load_dataset(path)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 12), total=st.integers(12, 5000))
def test_client_sizes_exhaust_pool(n, total):
    specs = dg.make_client_specs(n, n_train_total=total)
    sizes = [s.n_samples for s in specs[:n]]
    assert sum(sizes) == total
    assert max(sizes) - min(sizes) <= 1
