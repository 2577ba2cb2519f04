import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attriweight.dataset import (
    LabeledDataset,
    corrupt_labels,
    factor_ground_truth,
    generate_factor_dataset,
    generate_gaussian_classes,
    load_csv,
    make_splits,
    save_csv,
)
from attriweight.errors import InvalidArgument, ParseError
from attriweight.model import TrainConfig, accuracy, train


def test_gaussian_shape_and_balance():
    ds = generate_gaussian_classes(2, 500, 10, 3.0, 7)
    assert len(ds) == 1000 and ds.dim == 10
    assert np.bincount(ds.labels).tolist() == [500, 500]


def test_gaussian_is_deterministic():
    a = generate_gaussian_classes(2, 500, 10, 3.0, 7)
    b = generate_gaussian_classes(2, 500, 10, 3.0, 7)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.equals(b)


def test_gaussian_separable_for_logistic_regression():
    ds = generate_gaussian_classes(3, 100, 5, 5.0, 1)
    ckpt = train(ds, ds.ids, "LogisticRegression", TrainConfig(epochs=30, lr=0.1))
    assert accuracy(ckpt, ds.features, ds.labels) > 0.95


@pytest.mark.parametrize("args", [(1, 5, 3, 1.0, 0), (2, 0, 3, 1.0, 0), (2, 5, 1, 1.0, 0), (2, 5, 3, 0.0, 0)])
def test_gaussian_rejects_bad_sizes(args):
    with pytest.raises(InvalidArgument):
        generate_gaussian_classes(*args)


def test_factor_dataset_shape():
    ds = generate_factor_dataset(5, 5, 20, 8, 8, 3)
    assert len(ds) == 500
    assert ds.factor_labels.shape == (500, 2)
    a, b = ds.factor_labels.T
    assert np.array_equal(ds.labels, a * 5 + b)


def test_factor_dataset_shares_means_within_level():
    ds = generate_factor_dataset(3, 2, 4, 3, 2, 5, noise_std=0.0)
    a = ds.factor_labels[:, 0]
    for level in range(3):
        block = ds.features[a == level, :3]
        assert np.allclose(block, block[0])


def test_factor_ground_truth_is_the_level():
    ds = generate_factor_dataset(5, 5, 20, 8, 8, 3)
    q = ds.factor_labels[17]
    gt = factor_ground_truth(ds, q, 0)
    assert len(gt) == 100
    assert np.all(ds.factor_labels[gt, 0] == q[0])


def test_factor_dataset_rejects_degenerate():
    with pytest.raises(InvalidArgument):
        generate_factor_dataset(1, 5, 2, 2, 2, 0)


def test_corruption_count_matches_fraction():
    ds = generate_gaussian_classes(2, 500, 4, 1.0, 0)
    _, record = corrupt_labels(ds, 0.1, 9)
    assert len(record.corrupted_ids) == 100


def test_corruption_changes_exactly_recorded_ids():
    ds = generate_gaussian_classes(3, 200, 4, 1.0, 0)
    new, record = corrupt_labels(ds, 0.15, 2)
    changed = np.flatnonzero(new.labels != ds.labels)
    assert np.array_equal(changed, np.sort(record.corrupted_ids))
    for i in record.corrupted_ids:
        assert new.labels[i] != record.original_labels[int(i)]
        assert ds.labels[i] == record.original_labels[int(i)]


def test_corruption_deterministic_and_restricted():
    ds = generate_gaussian_classes(3, 100, 4, 1.0, 0)
    pool = np.arange(0, 300, 2)
    _, r1 = corrupt_labels(ds, 0.2, 5, ids=pool)
    _, r2 = corrupt_labels(ds, 0.2, 5, ids=pool)
    assert np.array_equal(r1.corrupted_ids, r2.corrupted_ids)
    assert np.all(np.isin(r1.corrupted_ids, pool))
    assert len(r1.corrupted_ids) == 30


def test_corruption_needs_two_classes():
    ds = LabeledDataset(np.zeros((4, 2)), np.zeros(4), np.arange(4), num_classes=1)
    with pytest.raises(InvalidArgument):
        corrupt_labels(ds, 0.5, 0)


def test_splits_example():
    ds = generate_gaussian_classes(2, 1000, 3, 1.0, 0)
    s = make_splits(ds, 1000, 500, 500, 1)
    sets = [set(s.train_ids.tolist()), set(s.weight_learning_ids.tolist()), set(s.eval_ids.tolist())]
    assert [len(x) for x in sets] == [1000, 500, 500]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert len(sets[0] | sets[1] | sets[2]) == 2000


def test_splits_reject_overflow():
    ds = generate_gaussian_classes(2, 10, 3, 1.0, 0)
    with pytest.raises(InvalidArgument):
        make_splits(ds, 10, 6, 5, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**9), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40))
def test_splits_always_disjoint(seed, a, b, c):
    ds = generate_gaussian_classes(2, 60, 2, 1.0, 0)
    s = make_splits(ds, a, b, c, seed)
    ids = np.concatenate([s.train_ids, s.weight_learning_ids, s.eval_ids])
    assert len(np.unique(ids)) == len(ids) == a + b + c


def test_csv_round_trip_is_exact(tmp_path):
    ds = generate_factor_dataset(2, 3, 4, 2, 3, 1)
    path = tmp_path / "d.csv"
    save_csv(ds, path)
    back = load_csv(path, ds.num_classes)
    assert back.equals(ds)
    assert back.features.tobytes() == ds.features.tobytes()


def test_csv_malformed_row_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,label,f0,f1\n0,1,0.5,0.25\n1,0,oops,1\n")
    with pytest.raises(ParseError) as err:
        load_csv(path)
    assert err.value.line == 3


def test_csv_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(ParseError, match="no header"):
        load_csv(path)
