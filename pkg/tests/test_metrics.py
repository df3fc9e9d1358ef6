import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from evdistill.errors import DataError, ShapeError
from evdistill.metrics import (
    accuracy,
    auroc,
    brier,
    ece,
    evaluate,
    evaluate_probs,
    nll,
    read_prediction_dump,
    reliability_bins,
    wasserstein1,
    write_prediction_dump,
)
from evdistill.data import Dataset


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([1, 0], [0, 1]) == 0.0
    assert accuracy([0, 1, 1, 0], [0, 1, 1, 1]) == 0.75
    with pytest.raises(ShapeError):
        accuracy([0, 1], [0])


def test_ece_examples_exact():
    assert ece(np.tile([1.0, 0.0], (7, 1)), [0] * 7) == 0.0
    assert ece(np.tile([0.75, 0.25], (10, 1)), [0] * 6 + [1] * 4) == 0.15
    probs = np.array([[0.55, 0.45]] * 4 + [[0.95, 0.05]] * 6)
    assert ece(probs, [0, 0, 1, 1] + [0] * 6) == 0.05


def test_ece_boundary_goes_to_lower_bin_and_one_to_top():
    bins = reliability_bins(np.array([[0.6, 0.4], [1.0, 0.0], [0.5, 0.5]]), [0, 0, 0])
    counts = [b["count"] for b in bins]
    assert counts[5] == 1  # 0.6 sits in (0.5, 0.6]
    assert counts[4] == 1  # 0.5 sits in (0.4, 0.5]
    assert counts[9] == 1


@given(st.integers(0, 10_000), st.integers(1, 20))
def test_ece_bins_partition_samples(seed, n_bins):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet([1, 1, 1], size=50)
    y = rng.integers(0, 3, 50)
    assert sum(b["count"] for b in reliability_bins(p, y, n_bins)) == 50
    assert 0.0 <= ece(p, y, n_bins) <= 1.0


def test_brier_examples():
    assert brier(np.eye(3), [0, 1, 2]) == 0.0
    assert brier([[0.5, 0.5]], [0]) == 0.25 and brier([[0.5, 0.5]], [1]) == 0.25
    assert abs(brier([[0.8, 0.2]], [0]) - 0.04) <= math.ulp(0.04)


def test_auroc_examples():
    assert auroc([0.1, 0.2], [0.8, 0.9]) == 1.0
    assert auroc([0.3, 0.1, 0.3], [0.1, 0.3, 0.3]) == 0.5
    assert auroc([0.1, 0.4], [0.3, 0.9]) == 0.75
    with pytest.raises(ValueError):
        auroc([], [1.0])


@given(
    st.lists(st.integers(0, 8), min_size=1, max_size=60),
    st.lists(st.integers(0, 8), min_size=1, max_size=60),
)
def test_auroc_equals_pair_counting(neg, pos):
    n, p = np.array(neg, float), np.array(pos, float)
    brute = (np.sum(p[:, None] > n[None]) + 0.5 * np.sum(p[:, None] == n[None])) / (n.size * p.size)
    assert auroc(n, p) == brute


def test_wasserstein_examples():
    assert wasserstein1([0.3, 0.1, 0.7], [0.7, 0.3, 0.1]) == 0.0
    assert wasserstein1([0, 0], [1, 1]) == 1.0
    assert wasserstein1([0, 1], [0.5, 0.5]) == 0.5
    with pytest.raises(ValueError):
        wasserstein1([], [1.0])


@given(
    st.lists(st.floats(-100, 100), min_size=1, max_size=40),
    st.lists(st.floats(-100, 100), min_size=1, max_size=40),
)
def test_wasserstein_matches_scipy(a, b):
    assert wasserstein1(a, b) == pytest.approx(stats.wasserstein_distance(a, b), rel=1e-9, abs=1e-9)
    assert wasserstein1(a, b) == wasserstein1(b, a)


def test_nll_floor():
    assert nll([[0.0, 1.0]], [0]) == pytest.approx(-math.log(1e-12))
    assert nll(np.full((3, 10), 0.1), [1, 2, 3]) == pytest.approx(math.log(10))


class _Const:
    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=float)

    def predict_proba(self, X):
        return self.probs[: len(X)]


def _ds(y, k):
    return Dataset([f"s{i}" for i in range(len(y))], np.zeros((len(y), 1)), y, k)


def test_evaluate_perfect_and_uniform_models():
    y = np.arange(20) % 4
    rep, _ = evaluate(_Const(np.eye(4)[y]), _ds(y, 4))
    assert (rep.accuracy, rep.ece, rep.brier) == (1.0, 0.0, 0.0) and rep.nll == pytest.approx(0.0, abs=1e-15)
    y = np.arange(100) % 10
    rep, _ = evaluate(_Const(np.full((100, 10), 0.1)), _ds(y, 10))
    assert rep.nll == pytest.approx(math.log(10), abs=1e-12)
    assert rep.accuracy == pytest.approx(0.1)  # argmax ties pick class 0, which is 1/K of balanced labels
    assert sum(b["count"] for b in rep.bins) == rep.n_samples == 100


def test_evaluate_counts_non_finite_rows_as_failures():
    probs = np.array([[0.9, 0.1], [np.nan, np.nan], [0.2, 0.8]])
    rep, _ = evaluate(_Const(probs), _ds([0, 0, 1], 2))
    assert rep.failures == 1 and rep.n_samples == 2


def test_evaluate_rejects_unlabelled_and_empty():
    with pytest.raises(DataError):
        evaluate(_Const([[1.0, 0.0]]), Dataset(["a"], np.zeros((1, 1)), None, 2))
    with pytest.raises(DataError):
        evaluate_probs(np.zeros((0, 2)), [])


def test_report_matches_recomputation_from_dump(tmp_path):
    rng = np.random.default_rng(0)
    probs = rng.dirichlet([1, 1, 1], size=40)
    ds = _ds(rng.integers(0, 3, 40), 3)
    rep, p = evaluate(_Const(probs), ds)
    write_prediction_dump(tmp_path / "d.csv", ds.ids, ds.y, p)
    ids, labels, back = read_prediction_dump(tmp_path / "d.csv")
    assert ids == list(ds.ids) and np.array_equal(back, probs)
    assert evaluate_probs(back, labels).to_dict() == rep.to_dict()
    json.dumps(rep.to_dict())
