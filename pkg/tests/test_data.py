"""Dataset synthesis, session splitting, partitioning and file formats."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcil.data import (
    examples_from_csv,
    examples_to_csv,
    load_cifar100,
    make_synthetic,
    partition_dirichlet,
    partition_iid,
    read_cifar100_file,
    split_sessions,
)
from dcil.nncore import ConfigError, InputError, ParameterError


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def test_synthetic_counts_and_shapes():
    ds = make_synthetic(5, 10, 4, 1.0, 0)
    assert ds.train_x.shape == (40, 4)  # 80% of 10 per class
    assert ds.test_x.shape == (10, 4)
    assert ds.n_classes == 5 and ds.input_dim == 4
    for c in range(5):
        assert (ds.train_y == c).sum() == 8
        assert (ds.test_y == c).sum() == 2


def test_synthetic_deterministic_per_seed():
    a = make_synthetic(4, 10, 3, 1.0, 42)
    b = make_synthetic(4, 10, 3, 1.0, 42)
    c = make_synthetic(4, 10, 3, 1.0, 43)
    assert np.array_equal(a.train_x, b.train_x)
    assert not np.array_equal(a.train_x, c.train_x)


def test_synthetic_spread_zero_collapses_to_centers():
    ds = make_synthetic(3, 10, 4, 0.0, 1)
    for c in range(3):
        pts = ds.train_x[ds.train_y == c]
        assert np.allclose(pts, pts[0], atol=1e-12)
        assert abs(np.linalg.norm(pts[0]) - 3.0) < 1e-12


def test_synthetic_rejects_degenerate_sizes():
    with pytest.raises(ParameterError):
        make_synthetic(1, 10, 4, 1.0, 0)
    with pytest.raises(ParameterError):
        make_synthetic(3, 10, 4, -0.5, 0)


# ---------------------------------------------------------------------------
# Session splitting
# ---------------------------------------------------------------------------


def test_split_sessions_disjoint_and_exhaustive():
    ds = make_synthetic(12, 10, 4, 1.0, 0)
    split = split_sessions(ds, 4, 4, 7)
    chunks = [split.base_classes, *split.session_classes]
    flat = [c for chunk in chunks for c in chunk]
    assert sorted(flat) == list(range(12))
    assert len(split.base_classes) == 4
    assert all(len(s) == 2 for s in split.session_classes)
    # training rows carry only their chunk's labels
    for chunk, (x, y) in zip(chunks, split.per_session_train):
        assert set(np.unique(y)) == set(chunk)
        assert len(x) == len(y) == 8 * len(chunk)


def test_split_sessions_seed_controls_assignment():
    ds = make_synthetic(12, 10, 4, 1.0, 0)
    assert split_sessions(ds, 4, 4, 1).base_classes != split_sessions(ds, 4, 4, 2).base_classes


def test_split_sessions_rejects_indivisible():
    ds = make_synthetic(10, 10, 4, 1.0, 0)
    with pytest.raises(ConfigError):
        split_sessions(ds, 4, 4, 0)  # 6 classes into 4 sessions


def test_split_sessions_test_pool_covers_all_classes():
    ds = make_synthetic(8, 10, 4, 1.0, 0)
    split = split_sessions(ds, 4, 2, 0)
    assert set(split.test_pool) == set(range(8))
    assert all(len(v) == 2 for v in split.test_pool.values())


# ---------------------------------------------------------------------------
# IID partitioning
# ---------------------------------------------------------------------------


def labeled_blob(n_per_class=20, n_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_per_class * n_classes, 2))
    y = np.repeat(np.arange(n_classes), n_per_class)
    return x, y


def rows_multiset(x):
    return sorted(map(tuple, x))


def test_partition_iid_conserves_examples():
    x, y = labeled_blob()
    part = partition_iid(x, y, 4, 0)
    all_x = np.concatenate([sx for sx, _ in part.shards])
    assert rows_multiset(all_x) == rows_multiset(x)
    assert sum(len(sy) for _, sy in part.shards) == len(y)


def test_partition_iid_balanced_per_class():
    x, y = labeled_blob(n_per_class=20)
    part = partition_iid(x, y, 4, 0)
    for _, sy in part.shards:
        for c in range(3):
            assert (sy == c).sum() == 5


def test_partition_iid_round_robin_sizes_with_remainder():
    x, y = labeled_blob(n_per_class=10, n_classes=1)
    part = partition_iid(x, y, 4, 0)
    sizes = sorted(len(sy) for _, sy in part.shards)
    assert sizes == [2, 2, 3, 3]


def test_partition_iid_rejects_too_few_examples():
    x, y = labeled_blob(n_per_class=2)
    with pytest.raises(ConfigError):
        partition_iid(x, y, 5, 0)


# ---------------------------------------------------------------------------
# Dirichlet partitioning
# ---------------------------------------------------------------------------


def test_partition_dirichlet_conserves_examples():
    x, y = labeled_blob()
    part = partition_dirichlet(x, y, 4, 0.5, 0)
    all_x = np.concatenate([sx for sx, _ in part.shards if len(sx)])
    assert rows_multiset(all_x) == rows_multiset(x)


def test_partition_dirichlet_near_uniform_at_huge_alpha():
    x, y = labeled_blob(n_per_class=100, n_classes=4)
    part = partition_dirichlet(x, y, 5, 1e6, 0)
    for _, sy in part.shards:
        for c in range(4):
            assert abs((sy == c).sum() / 100.0 - 0.2) < 0.05


def test_partition_dirichlet_concentrates_at_tiny_alpha():
    hits = 0
    trials = 0
    for seed in range(10):
        x, y = labeled_blob(n_per_class=50, n_classes=4, seed=seed)
        part = partition_dirichlet(x, y, 5, 0.01, seed)
        for c in range(4):
            trials += 1
            top = max((sy == c).sum() for _, sy in part.shards)
            if top >= 0.95 * 50:
                hits += 1
    assert hits / trials >= 0.9


def test_partition_dirichlet_rejects_bad_params():
    x, y = labeled_blob()
    with pytest.raises(ParameterError):
        partition_dirichlet(x, y, 4, 0.0, 0)
    with pytest.raises(ConfigError):
        partition_dirichlet(x, y, 1, 1.0, 0)


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 10_000), st.floats(0.05, 100))
def test_partition_dirichlet_always_disjoint_exhaustive(seed, alpha):
    x, y = labeled_blob(n_per_class=13, n_classes=2, seed=1)
    part = partition_dirichlet(x, y, 3, alpha, seed)
    sizes = [len(sy) for _, sy in part.shards]
    assert sum(sizes) == len(y)
    all_x = np.concatenate([sx for sx, _ in part.shards if len(sx)])
    assert rows_multiset(all_x) == rows_multiset(x)


def mean_site_entropy(n_sites, alpha, seeds=20, n_per_class=60, n_classes=4):
    vals = []
    for seed in range(seeds):
        x, y = labeled_blob(n_per_class, n_classes, seed=1)
        part = partition_dirichlet(x, y, n_sites, alpha, seed)
        for _, sy in part.shards:
            if len(sy) == 0:
                vals.append(0.0)
                continue
            p = np.bincount(sy, minlength=n_classes) / len(sy)
            p = p[p > 0]
            vals.append(float(-(p * np.log(p)).sum()))
    return float(np.mean(vals))


def test_partition_dirichlet_entropy_monotone_in_alpha():
    ents = [mean_site_entropy(5, a) for a in (0.01, 0.1, 1.0, 10.0, 1e6)]
    assert all(a < b for a, b in zip(ents, ents[1:]))


# ---------------------------------------------------------------------------
# Binary image file format
# ---------------------------------------------------------------------------


def write_records(path, labels, pixel_value=128):
    rec = []
    for fine in labels:
        rec.append(bytes([0, fine]) + bytes([pixel_value] * 3072))
    path.write_bytes(b"".join(rec))


def test_read_binary_records(tmp_path):
    p = tmp_path / "train.bin"
    write_records(p, [3, 7, 99])
    x, y = read_cifar100_file(str(p))
    assert x.shape == (3, 3072)
    assert y.tolist() == [3, 7, 99]
    assert np.allclose(x, 128 / 255.0)


def test_read_binary_pooling(tmp_path):
    p = tmp_path / "train.bin"
    write_records(p, [1], pixel_value=255)
    x, _ = read_cifar100_file(str(p), pool_grid=4)
    assert x.shape == (1, 48)
    assert np.allclose(x, 1.0)
    with pytest.raises(ParameterError):
        read_cifar100_file(str(p), pool_grid=5)


def test_read_binary_truncation_reports_offset(tmp_path):
    p = tmp_path / "train.bin"
    write_records(p, [1, 2])
    p.write_bytes(p.read_bytes()[:-10])  # drop 10 bytes of record 2
    with pytest.raises(IOError, match="byte offset 3074"):
        read_cifar100_file(str(p))


def test_load_directory_pair(tmp_path):
    write_records(tmp_path / "train.bin", [0, 1, 2, 3])
    write_records(tmp_path / "test.bin", [1, 2])
    ds = load_cifar100(str(tmp_path), pool_grid=2)
    assert ds.train_x.shape == (4, 12)
    assert ds.test_y.tolist() == [1, 2]
    assert ds.n_classes == 100


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------


def test_examples_csv_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(9, 5))
    y = rng.integers(0, 4, size=9)
    path = str(tmp_path / "ex.csv")
    examples_to_csv(x, y, path)
    x2, y2 = examples_from_csv(path)
    assert np.array_equal(x, x2)  # repr round trip is exact
    assert np.array_equal(y, y2)
    header = open(path).readline().strip().split(",")
    assert header == [f"x_{i}" for i in range(5)] + ["y"]


def test_examples_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(InputError):
        examples_from_csv(str(p))
