import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from starnet.activation import Activation, act_apply, act_invert
from starnet.errors import NonInvertibleActivation

finite = st.floats(-1e300, 1e300, allow_nan=False, allow_infinity=False)
slopes = st.floats(1e-3, 1.0)


def test_branches():
    act = Activation(0.5)
    assert act_apply(act, np.array([2.0]))[0] == 2.0
    assert act_apply(act, np.array([-2.0]))[0] == -1.0
    assert act_invert(act, np.array([-1.0]))[0] == -2.0


def test_unit_slope_is_identity():
    x = np.random.default_rng(0).standard_normal((4, 5))
    assert np.array_equal(act_apply(Activation(1.0), x), x)
    assert np.array_equal(act_invert(Activation(1.0), x), x)


def test_relu_is_not_invertible():
    with pytest.raises(NonInvertibleActivation):
        Activation(0.0).invert(np.ones(3))


@pytest.mark.parametrize("slope", [-0.1, 1.5])
def test_slope_range(slope):
    with pytest.raises(ValueError):
        Activation(slope)


def test_round_trip_random():
    act = Activation(0.5)
    y = np.random.default_rng(1).standard_normal((50, 20))
    back = act.apply(act.invert(y))
    pos = y >= 0
    assert np.array_equal(back[pos], y[pos])
    assert np.all(np.abs(back[~pos] - y[~pos]) <= np.spacing(np.abs(y[~pos])))


@given(finite, slopes)
def test_bijective_within_one_ulp(y, slope):
    act = Activation(slope)
    back = act.apply(act.invert(np.array([y])))[0]
    assert abs(back - y) <= np.spacing(abs(y))


@given(finite, finite, slopes)
def test_strictly_monotone(a, b, slope):
    if a == b:
        return
    lo, hi = min(a, b), max(a, b)
    ya, yb = Activation(slope).apply(np.array([lo, hi]))
    # the negative branch can underflow to equality for subnormal inputs
    assert ya < yb or (ya == yb and abs(slope * lo - slope * hi) == 0.0)
