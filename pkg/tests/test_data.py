import numpy as np
import pytest
from hypothesis import given, strategies as st

from feddhad.data import (
    Dataset,
    dirichlet_partition,
    generate_synthetic,
    global_distribution,
    label_distribution,
    load_dataset,
    save_dataset,
    server_splits,
    stratified_split,
)
from feddhad.errors import ConfigError, DomainError, StructuralError


@given(
    st.integers(2, 6),
    st.integers(1, 25),
    st.floats(0.05, 50.0),
    st.integers(0, 10_000),
)
def test_partition_covers_every_sample_once(classes, devices, beta, seed):
    ds = generate_synthetic(classes, 2, 30, 0.5, seed)
    plan = dirichlet_partition(ds, devices, beta, seed)
    allidx = np.concatenate(plan.device_indices)
    assert np.array_equal(np.sort(allidx), np.arange(len(ds)))
    assert all(len(ix) > 0 for ix in plan.device_indices)
    assert plan.sizes.sum() == len(ds)


def test_partition_is_deterministic():
    ds = generate_synthetic(4, 3, 50, 0.5, 1)
    a = dirichlet_partition(ds, 7, 0.3, 9)
    b = dirichlet_partition(ds, 7, 0.3, 9)
    assert all(np.array_equal(x, y) for x, y in zip(a.device_indices, b.device_indices))


def test_small_concentration_gives_skewed_devices():
    ds = generate_synthetic(10, 2, 200, 0.5, 0)
    skewed = dirichlet_partition(ds, 20, 0.1, 0)
    flat = dirichlet_partition(ds, 20, 100.0, 0)
    peak = lambda plan: np.mean([label_distribution(ds, ix).probs.max() for ix in plan.device_indices])
    assert peak(skewed) > peak(flat) + 0.3


def test_partition_errors():
    ds = generate_synthetic(2, 2, 3, 0.5, 0)
    with pytest.raises(ConfigError):
        dirichlet_partition(ds, 10, 0.5, 0)
    with pytest.raises(ConfigError):
        dirichlet_partition(ds, 2, 0.0, 0)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=40))
def test_label_distribution_is_a_probability_vector(labels):
    ds = Dataset(np.zeros((len(labels), 1)), np.array(labels), 5)
    p = label_distribution(ds).probs
    assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)
    assert np.allclose(p * len(labels), np.bincount(labels, minlength=5))


def test_empty_label_distribution_raises():
    ds = Dataset(np.zeros((3, 1)), np.array([0, 1, 1]), 2)
    with pytest.raises(DomainError):
        label_distribution(ds, [])


def test_global_distribution_is_sample_weighted():
    from feddhad.data import LabelDistribution

    p = global_distribution([LabelDistribution([1.0, 0.0]), LabelDistribution([0.0, 1.0])], [1, 3])
    assert np.allclose(p.probs, [0.25, 0.75])


@given(st.integers(1, 8), st.floats(0.0, 0.5), st.integers(0, 1000))
def test_server_splits_are_disjoint_and_cover(per_class, frac, seed):
    ds = generate_synthetic(3, 2, 20, 0.5, seed)
    ds = Dataset(ds.features + np.arange(len(ds))[:, None] * 1e3, ds.labels, 3)  # unique rows
    bal, val, rest = server_splits(ds, per_class, frac, seed)
    assert len(bal) + len(val) + len(rest) == len(ds)
    assert len(val) == round(frac * len(ds))
    rows = np.concatenate([bal.features[:, 0], val.features[:, 0], rest.features[:, 0]])
    assert len(np.unique(rows)) == len(ds)
    assert np.array_equal(np.bincount(bal.labels, minlength=3), np.full(3, per_class))


def test_server_split_needs_enough_samples():
    with pytest.raises(ConfigError):
        server_splits(generate_synthetic(2, 2, 4, 0.5, 0), 5, 0.1, 0)


def test_stratified_split_keeps_class_ratios():
    ds = generate_synthetic(4, 2, 50, 0.5, 0)
    held, rest = stratified_split(ds, 0.2, 0)
    assert np.array_equal(np.bincount(held.labels), np.full(4, 10))
    assert len(held) + len(rest) == len(ds)


def test_dataset_validation():
    with pytest.raises(StructuralError):
        Dataset(np.zeros(3), np.zeros(3, int), 2)
    with pytest.raises(StructuralError):
        Dataset(np.zeros((3, 1)), np.array([0, 1, 2]), 2)


def test_dataset_file_round_trip(tmp_path):
    ds = generate_synthetic(3, 4, 5, 0.5, 0)
    path = tmp_path / "d.bin"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.features, ds.features.astype(np.float32).astype(float))
    raw = path.read_bytes()
    path.write_bytes(raw[:-2])
    with pytest.raises(StructuralError):
        load_dataset(path)


@given(st.integers(2, 5), st.integers(1, 4), st.integers(0, 1000))
def test_modes_place_each_class_on_its_own_unit_means(classes, modes, seed):
    ds = generate_synthetic(classes, 6, 40, 0.0, seed, modes_per_class=modes)
    assert np.array_equal(np.bincount(ds.labels), np.full(classes, 40))
    assert np.allclose(np.linalg.norm(ds.features, axis=1), 1.0)
    for c in range(classes):
        assert len(np.unique(ds.features[ds.labels == c], axis=0)) <= modes
    # no component is shared between classes
    seen = [set(map(tuple, np.round(ds.features[ds.labels == c], 12))) for c in range(classes)]
    assert all(not (seen[a] & seen[b]) for a in range(classes) for b in range(a + 1, classes))


def test_modes_must_be_positive():
    with pytest.raises(ConfigError):
        generate_synthetic(2, 2, 5, 0.5, 0, modes_per_class=0)
