import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subaudit import data, models


def _fit_nonprivate(ds, steps=300, lr=0.5):
    arch = models.LinearSoftmax(ds.dim, ds.n_classes)
    theta = np.zeros((1, arch.n_params))
    w = np.ones((1, len(ds))) / len(ds)
    for _ in range(steps):
        theta -= lr * arch.clipped_grad_sum_lanes(theta, ds.X, ds.y, w, np.inf)
    return models.Model(arch, theta[0])


def test_same_seed_same_dataset():
    a = data.gen_synthetic(20, 3, 4, 2.0, np.random.default_rng(5))
    b = data.gen_synthetic(20, 3, 4, 2.0, np.random.default_rng(5))
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.y, b.y)
    assert a.provenance == 'synthetic'


def test_separated_clusters_are_learnable():
    ds = data.gen_synthetic(500, 32, 10, 10.0, np.random.default_rng(0))
    model = _fit_nonprivate(ds)
    assert models.accuracy(model, ds.X, ds.y) > 0.95


def test_zero_separation_carries_no_signal():
    gen = np.random.default_rng(1)
    full = data.gen_synthetic(4000, 8, 4, 0.0, gen)
    train, test = full.subset(np.arange(2000)), full.subset(np.arange(2000, 4000))
    acc = models.accuracy(_fit_nonprivate(train), test.X, test.y)
    se = np.sqrt(0.25 * 0.75 / 2000)
    assert abs(acc - 0.25) < 3 * se + 0.01


def test_csv_round_trip_is_exact(tmp_path):
    ds = data.gen_synthetic(7, 5, 3, 1.0, np.random.default_rng(2))
    path = tmp_path / 'd.csv'
    data.write_csv(ds, path)
    back = data.load_csv(path, n_classes=3)
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.y, ds.y)
    assert back.provenance == 'csv'


def test_csv_three_rows(tmp_path):
    path = tmp_path / 'd.csv'
    path.write_text('label,feat_0,feat_1\n0,1.5,2\n1,-1e-3,0\n2,3,4\n')
    ds = data.load_csv(path)
    assert len(ds) == 3 and ds.dim == 2 and ds.n_classes == 3


@pytest.mark.parametrize('text, where', [
    ('label,feat_0\n0,1\n1,2,3\n', ':3:'),
    ('label,feat_0\n0,abc\n', ':2:'),
    ('', 'empty'),
    ('label,feat_0\n', 'no data'),
    ('x,feat_0\n0,1\n', ':1:'),
])
def test_csv_errors_name_the_line(tmp_path, text, where):
    path = tmp_path / 'bad.csv'
    path.write_text(text)
    with pytest.raises(data.DataFormatError, match=where):
        data.load_csv(path)


def test_split_counts_and_errors():
    ds = data.gen_synthetic(10, 2, 2, 1.0, np.random.default_rng(0))
    train, aux = data.split_aux(ds, 0.5, np.random.default_rng(1))
    assert len(train) == len(aux) == 5
    with pytest.raises(ValueError):
        data.split_aux(ds, 0.01, np.random.default_rng(1))
    with pytest.raises(ValueError):
        data.split_aux(ds, 1.0, np.random.default_rng(1))


@settings(max_examples=100)
@given(n=st.integers(2, 60), fraction=st.floats(0.05, 0.95), seed=st.integers(0, 2**31))
def test_split_is_a_disjoint_partition(n, fraction, seed):
    ds = data.gen_synthetic(n, 2, 2, 1.0, np.random.default_rng(seed))
    n_aux = int(round(fraction * n))
    if n_aux in (0, n):
        with pytest.raises(ValueError):
            data.split_aux(ds, fraction, np.random.default_rng(seed))
        return
    train, aux = data.split_aux(ds, fraction, np.random.default_rng(seed))
    assert set(train.ids).isdisjoint(aux.ids)
    assert sorted(np.concatenate([train.ids, aux.ids])) == list(range(n))
    again, _ = data.split_aux(ds, fraction, np.random.default_rng(seed))
    np.testing.assert_array_equal(train.ids, again.ids)


def test_dataset_validation():
    with pytest.raises(ValueError):
        data.Dataset(np.zeros((2, 2)), [0, 3], 2)
    with pytest.raises(ValueError):
        data.Dataset(np.zeros((2, 2)), [0, 1], 2, ids=[4, 4])
    ds = data.Dataset(np.eye(3), [0, 1, 0], 2)
    assert len(ds.without(1)) == 2 and list(ds.without(1).ids) == [0, 2]
