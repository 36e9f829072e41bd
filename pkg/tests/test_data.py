import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oneshot_fl.data import (
    BatchStream,
    PartitionSpec,
    batch_stream,
    epoch_batches,
    gen_synthetic,
    label_tv_distance,
    load_csv,
    partition,
    write_csv,
    write_shards,
)
from oneshot_fl.numerics import InvalidInputError, RngStream


def test_gen_synthetic_deterministic():
    a = gen_synthetic("regression", 50, 4, seed=3, n_groups=2, shift=1.0)
    b = gen_synthetic("regression", 50, 4, seed=3, n_groups=2, shift=1.0)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.targets, b.targets)


def test_gen_synthetic_rejects_empty():
    with pytest.raises(InvalidInputError):
        gen_synthetic("binary", 0, 3, seed=0)


def test_shift_zero_means_one_distribution():
    ds = gen_synthetic("binary", 400, 3, seed=0, n_groups=4, shift=0.0)
    # groups differ only in their row draws: every group sees the same labelling rule
    a = gen_synthetic("binary", 400, 3, seed=0, n_groups=1, shift=0.0)
    assert np.array_equal(ds.inputs, a.inputs) and np.array_equal(ds.targets, a.targets)


def test_margin_gives_linearly_separable_data():
    d = 5
    ds = gen_synthetic("binary", 500, d, seed=11, margin=1.0)
    w_star = RngStream(0, ("teacher", "binary", d)).generator().standard_normal(d)
    score = ds.inputs @ w_star
    assert np.all((score > 0) == (ds.targets > 0.5))
    assert np.min(np.abs(score / np.linalg.norm(w_star))) >= 0.5 - 1e-12


def test_family_fixes_labelling_function():
    a = gen_synthetic("binary", 2000, 4, seed=1, family=3)
    b = gen_synthetic("binary", 2000, 4, seed=2, family=3)
    w_star = RngStream(3, ("teacher", "binary", 4)).generator().standard_normal(4)
    for ds in (a, b):
        assert np.all((ds.inputs @ w_star >= 0) == (ds.targets > 0.5))


def test_partition_single_client_is_whole_dataset():
    ds = gen_synthetic("regression", 37, 2, seed=0)
    (shard,) = partition(ds, PartitionSpec("dirichlet", 1, seed=0, alpha=0.1))
    assert np.array_equal(shard.inputs, ds.inputs)


def test_iid_even_split():
    ds = gen_synthetic("regression", 1000, 2, seed=0)
    shards = partition(ds, PartitionSpec("iid", 10, seed=4))
    assert [s.n for s in shards] == [100] * 10


def test_small_alpha_dirichlet_concentrates_labels():
    ds = gen_synthetic("binary", 1000, 3, seed=0)
    shards = partition(ds, PartitionSpec("dirichlet", 5, seed=7, alpha=0.1))
    top = [max(np.mean(s.labels() == c) for c in (0, 1)) for s in shards]
    assert max(top) > 0.9


def test_large_alpha_dirichlet_is_near_uniform():
    ds = gen_synthetic("binary", 10_000, 3, seed=0)
    overall = np.mean(ds.labels() == 1)
    shards = partition(ds, PartitionSpec("dirichlet", 5, seed=1, alpha=1e6))
    assert max(abs(np.mean(s.labels() == 1) - overall) for s in shards) < 0.05


def test_task_split_keeps_groups_together():
    ds = gen_synthetic("binary", 300, 3, seed=0, n_groups=3, shift=1.0)
    shards = partition(ds, PartitionSpec("task-split", 3, seed=0))
    assert all(len(np.unique(s.groups)) == 1 for s in shards)


@given(
    st.sampled_from(["iid", "dirichlet", "task-split"]),
    st.integers(1, 12),
    st.integers(12, 200),
    st.integers(0, 1000),
    st.floats(0.05, 50.0),
)
def test_partition_is_exact_cover_and_reproducible(strategy, m, n, seed, alpha):
    ds = gen_synthetic("binary", n, 2, seed=seed, n_groups=3)
    spec = PartitionSpec(strategy, m, seed=seed, alpha=alpha)
    shards = partition(ds, spec)
    assert len(shards) == m and all(s.n >= 1 for s in shards)
    rows = np.sort(np.concatenate([s.index for s in shards]))
    assert np.array_equal(rows, np.arange(n))
    again = partition(ds, spec)
    assert all(np.array_equal(a.index, b.index) for a, b in zip(shards, again))


def test_empty_shard_fallback_is_recorded():
    ds = gen_synthetic("binary", 12, 2, seed=0)
    shards = partition(ds, PartitionSpec("dirichlet", 10, seed=3, alpha=0.01))
    assert all(s.n >= 1 for s in shards)
    assert shards[0].meta.get("fallback_moves", 0) >= 1


def test_dirichlet_heterogeneity_monotone_in_expectation():
    tv = {0.1: [], 100.0: []}
    for seed in range(20):
        ds = gen_synthetic("binary", 600, 3, seed=seed)
        for alpha in tv:
            tv[alpha].append(label_tv_distance(partition(ds, PartitionSpec("dirichlet", 5, seed, alpha))))
    assert np.mean(tv[0.1]) > np.mean(tv[100.0])


def test_csv_fixture_and_roundtrip(tmp_path):
    p = tmp_path / "three.csv"
    p.write_text("x0,x1,y\n1,2,0.5\n3,4,1.5\n5,6,2.5\n")
    assert load_csv(p).n == 3
    ds = gen_synthetic("regression", 40, 3, seed=5)
    write_csv(tmp_path / "rt.csv", ds)
    back = load_csv(tmp_path / "rt.csv")
    assert np.allclose(back.inputs, ds.inputs, atol=1e-12, rtol=0)
    assert np.allclose(back.targets, ds.targets, atol=1e-12, rtol=0)


@pytest.mark.parametrize("cell", ["nan", "abc"])
def test_csv_bad_cell_names_line(tmp_path, cell):
    p = tmp_path / "bad.csv"
    p.write_text(f"x0,y\n1,2\n{cell},3\n")
    with pytest.raises(InvalidInputError, match=r"bad\.csv:3"):
        load_csv(p)


def test_write_shards_manifest(tmp_path):
    ds = gen_synthetic("binary", 30, 2, seed=0)
    shards = partition(ds, PartitionSpec("iid", 3, seed=0))
    write_shards(tmp_path, shards, {"seed": 0})
    assert (tmp_path / "manifest.json").exists()


def test_batch_stream_full_batch_and_remainder():
    ds = gen_synthetic("regression", 10, 2, seed=0)
    (full,) = epoch_batches(ds, 10, RngStream(0, ()))
    assert sorted(full.index) == list(range(10))
    sizes = [b.n for b in epoch_batches(ds, 3, RngStream(0, ()))]
    assert sizes == [3, 3, 3, 1]


def test_batch_stream_oversized_batch_uses_shard_in_order():
    ds = gen_synthetic("regression", 5, 2, seed=0)
    s = batch_stream(ds, 50, RngStream(0, ()))
    assert np.array_equal(s.next_indices(), np.arange(5))


def test_batch_stream_deterministic():
    a = BatchStream(23, 4, RngStream(8, ("b",)))
    b = BatchStream(23, 4, RngStream(8, ("b",)))
    for _ in range(20):
        assert np.array_equal(a.next_indices(), b.next_indices())
