import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special as sp

from evdistill.special import digamma, lgamma

EULER_GAMMA = 0.57721566490153286061


def _digamma_oracle(x):
    """Recurrence up to x >= 30 then the asymptotic series."""
    acc = 0.0
    while x < 30:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = inv2 * (1 / 12 - inv2 * (1 / 120 - inv2 * (1 / 252 - inv2 * (1 / 240 - inv2 / 132))))
    return acc + math.log(x) - 0.5 / x - series


@pytest.mark.parametrize("x", [0.5, 1.0, 2.0, 10.5])
def test_digamma_reference_points(x):
    assert abs(digamma(x) - _digamma_oracle(x)) <= 1e-10


def test_digamma_at_one_is_minus_euler_gamma():
    assert digamma(1.0) == pytest.approx(-EULER_GAMMA, abs=1e-12)


def test_digamma_recurrence_on_integers():
    assert digamma(3.0) - digamma(2.0) == pytest.approx(0.5, abs=1e-14)


@pytest.mark.parametrize("n", range(1, 15))
def test_lgamma_small_integers(n):
    assert lgamma(float(n)) == pytest.approx(math.log(math.factorial(n - 1)), abs=1e-12)


@given(st.floats(0.01, 1e6))
def test_lgamma_and_digamma_match_scipy(x):
    assert lgamma(x) == pytest.approx(sp.gammaln(x), rel=1e-12, abs=1e-12)
    assert digamma(x) == pytest.approx(sp.digamma(x), rel=1e-11, abs=1e-11)


def test_vectorised_shapes():
    x = np.linspace(0.3, 40, 24).reshape(4, 6)
    assert lgamma(x).shape == x.shape and digamma(x).shape == x.shape
    np.testing.assert_allclose(lgamma(x), sp.gammaln(x), rtol=1e-12)
