import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evdistill.data import Dataset, SyntheticSpec, gaussian_bayes_accuracy, load, make_synthetic, save, split
from evdistill.errors import ConfigError, DataError


def test_empty_csv_keeps_class_count(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("# n_classes=3\nid,y,f0,f1\n")
    ds = load(p)
    assert len(ds) == 0 and ds.n_classes == 3 and ds.dim == 2


def test_three_row_csv(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,y,f0,f1\na,0,1.0,2.0\nb,1,3.0,4.0\nc,1,5.0,6.0\n")
    ds = load(p)
    assert len(ds) == 3 and ds.dim == 2 and ds.ids == ("a", "b", "c")
    np.testing.assert_array_equal(ds.y, [0, 1, 1])


def test_missing_ids_default_to_row_index(tmp_path):
    p = tmp_path / "n.jsonl"
    p.write_text('{"y": 0, "x": [1, 2]}\n{"y": 1, "x": [3, 4]}\n')
    assert load(p).ids == ("0", "1")


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
def test_round_trip(tmp_path, fmt):
    ds = make_synthetic(SyntheticSpec(dim=4, n_samples=25, seed=3))
    back = load(save(ds, tmp_path / f"d.{fmt}"))
    assert back.ids == ds.ids and back.n_classes == ds.n_classes and back.name == ds.name
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)


@pytest.mark.parametrize(
    "body, needle",
    [
        ("id,y,f0,f1\na,0,1.0\n", "row 1"),
        ("id,y,f0,f1\na,0,1.0,2.0\nb,0,x,2.0\n", "row 2"),
        ("id,y,f0\na,0,1.0\nb,0,2.0\nc,-1,3.0\n", "row 3"),
        ("id,y,f0\na,0,nan\n", "row 1"),
    ],
)
def test_bad_rows_report_row_number(tmp_path, body, needle):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(DataError, match=needle):
        load(p)


def test_ragged_jsonl_and_label_range(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text('{"y": 0, "x": [1, 2]}\n{"y": 1, "x": [3]}\n')
    with pytest.raises(DataError, match="row 2"):
        load(p)
    q = tmp_path / "k.csv"
    q.write_text("id,y,f0\na,0,1\nb,5,2\n")
    with pytest.raises(DataError, match="row 2"):
        load(q, n_classes=2)


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(["a", "a"], np.zeros((2, 1)), None, 2)
    with pytest.raises(DataError):
        Dataset(["a"], np.zeros((1, 1)), [3], 2)
    ds = Dataset(["a"], np.zeros((1, 1)), [1], 2)
    with pytest.raises(ValueError):
        ds.X[0, 0] = 1.0


def test_unknown_format_and_missing_file(tmp_path):
    (tmp_path / "x.parquet").write_text("")
    with pytest.raises(ConfigError):
        load(tmp_path / "x.parquet")
    with pytest.raises(DataError):
        load(tmp_path / "missing.csv")


def _labelled(n=200, k=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset([f"s{i}" for i in range(n)], rng.normal(size=(n, 2)), rng.integers(0, k, n), k)


def test_split_all_train():
    tr, va, te = split(_labelled(), (1.0, 0.0, 0.0))
    assert len(tr) == 200 and len(va) == 0 and len(te) == 0


def test_split_deterministic_and_stratified():
    ds = _labelled(301)
    a, b = split(ds, (0.6, 0.2, 0.2), seed=5), split(ds, (0.6, 0.2, 0.2), seed=5)
    assert all(x.ids == y.ids for x, y in zip(a, b))
    glob = np.bincount(ds.y, minlength=3) / len(ds)
    for part in a:
        counts = np.bincount(part.y, minlength=3)
        assert np.all(np.abs(counts - glob * len(part)) <= 1 + 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 300), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 1000))
def test_split_disjoint_and_exhaustive(n, f1, f2, seed):
    f2 = f2 * (1 - f1)
    parts = split(_labelled(n, seed=seed), (f1, f2, 1 - f1 - f2), seed)
    ids = [i for p in parts for i in p.ids]
    assert len(ids) == len(set(ids)) == n


def test_split_small_class_warns_and_falls_back():
    ds = Dataset(["a", "b", "c", "d"], np.zeros((4, 1)), [0, 0, 0, 1], 2)
    with pytest.warns(UserWarning, match="fewer samples"):
        parts = split(ds, (0.5, 0.25, 0.25))
    assert sum(len(p) for p in parts) == 4


def test_split_rejects_bad_fractions():
    with pytest.raises(ConfigError):
        split(_labelled(), (0.5, 0.5, 0.5))


def test_synthetic_zero_shift_ood_matches_id():
    spec = SyntheticSpec(dim=4, n_samples=4000, seed=1)
    a, b = make_synthetic(spec), make_synthetic(spec, ood=True)
    assert not np.array_equal(a.X, b.X)
    assert np.all(np.abs(a.X.mean(0) - b.X.mean(0)) < 3 * spec.sigma / np.sqrt(4000))


def test_synthetic_bayes_accuracy_two_dim():
    spec = SyntheticSpec(dim=3, n_samples=20_000, separation=4.0, seed=2, means=((-2, -2, 0), (2, 2, 0)))
    ds = make_synthetic(spec)
    # the optimal rule thresholds the projection onto the mean difference
    emp = np.mean((ds.X[:, 0] + ds.X[:, 1] > 0) == (ds.y == 1))
    closed = gaussian_bayes_accuracy(np.hypot(4, 4), 1.0)
    assert closed > 0.95 and emp == pytest.approx(closed, abs=0.01)
    assert gaussian_bayes_accuracy(4.0, 1.0) > 0.95  # means (-2, 2) on one axis, d = 2


def test_synthetic_deterministic_bytes(tmp_path):
    spec = SyntheticSpec(seed=9, n_samples=50)
    a = save(make_synthetic(spec), tmp_path / "a.csv").read_bytes()
    b = save(make_synthetic(spec), tmp_path / "b.csv").read_bytes()
    assert a == b


def test_synthetic_ood_label_count_change():
    spec = SyntheticSpec(dim=8, n_samples=400, ood_shift=6.0, ood_classes=2, seed=0)
    ood = make_synthetic(spec, ood=True)
    centre = spec.class_means().mean(0)
    assert ood.n_classes == 2
    assert ood.X[:, -1].mean() == pytest.approx(centre[-1] + 6.0, abs=0.3)
    assert ood.ids[0].startswith("ood")


def test_synthetic_rejects_bad_sigma():
    with pytest.raises(ConfigError):
        make_synthetic(SyntheticSpec(sigma=0.0))
