import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randimpulse.exceptions import InvalidSpec
from randimpulse.model import (
    Affine,
    Constant,
    LambdaPair,
    ModelSpec,
    PiecewiseLinear,
    TwoSidedLinear,
    benchmark_default,
    eval_b,
    eval_f,
    eval_l,
    eval_sigma,
    validate_assumptions,
)


def test_benchmark_costs():
    spec = benchmark_default()
    assert eval_l(spec, 0.0) == 2.0
    assert eval_f(spec, 0.0) == 0.0
    assert eval_f(spec, -3.0) == 3.0
    assert eval_l(spec, -4.0) == 4.0
    assert eval_b(spec, 1.7) == pytest.approx(0.03)
    assert eval_sigma(spec, -2.0) == pytest.approx(0.2)


def test_benchmark_passes_with_expected_margins():
    report = validate_assumptions(benchmark_default())
    assert report.passed, str(report)
    assert report["r - G in (0, L_f/L_l)"].margin == pytest.approx(0.1)
    assert report["h - r k_- > 0"].margin == pytest.approx(0.95)
    assert report["p - r k_+ > 0"].margin == pytest.approx(0.95)
    spec = benchmark_default()
    assert spec.G == 0.0 and spec.lip_b_sigma == 0.0
    assert spec.lip_f / spec.lip_l == pytest.approx(2.0)
    assert any("unbounded" in w for w in report.warnings)


def test_zero_discount_fails_lower_endpoint():
    report = validate_assumptions(benchmark_default(r=0.0))
    assert not report.passed
    assert [c.name for c in report.failed()] == ["r - G in (0, L_f/L_l)"]


def test_degenerate_volatility_fails_ellipticity():
    report = validate_assumptions(benchmark_default(sigma=0.0))
    assert not report["uniform ellipticity sigma >= sigma0 > 0"].passed


def test_asymmetric_fixed_costs_break_subadditivity():
    # l(x)+l(y) >= l(x+y)+l(0) needs K = min(K+, K-) for the two-sided form
    report = validate_assumptions(benchmark_default(K_plus=3.0, K_minus=2.0))
    assert not report["l(0) = inf l"].passed or not report["l(x) + l(y) >= l(x + y) + K"].passed


def test_validation_is_pure():
    spec = benchmark_default()
    assert str(validate_assumptions(spec)) == str(validate_assumptions(spec))


def test_subadditivity_on_pair_grid():
    spec = benchmark_default()
    t = np.linspace(-10, 10, 100)
    x, y = np.meshgrid(t, t)
    gap = eval_l(spec, x) + eval_l(spec, y) - eval_l(spec, x + y) - spec.K
    assert gap.min() >= -1e-12


def test_numbers_wrap_to_constants():
    spec = ModelSpec(0.03, 0.2, 0.1, TwoSidedLinear(0, 1, 0, 1), TwoSidedLinear(2, 0.5, 2, 0.5))
    assert isinstance(spec.drift, Constant) and isinstance(spec.volatility, Constant)


@pytest.mark.parametrize(
    "make",
    [
        lambda: Constant(float("nan")),
        lambda: PiecewiseLinear((0.0, 0.0), (1.0, 2.0)),
        lambda: PiecewiseLinear((0.0, 1.0), (1.0,)),
        lambda: ModelSpec("drift", 0.2, 0.1, Constant(0), Constant(1)),
        lambda: LambdaPair(0.0, 0.5),
        lambda: LambdaPair(0.5, -1.0),
    ],
)
def test_malformed_inputs_raise(make):
    with pytest.raises(InvalidSpec):
        make()


def test_piecewise_linear_exact_lipschitz_and_extrema():
    d = PiecewiseLinear((-1.0, 0.0, 2.0), (1.0, 0.0, 3.0), left_slope=-0.5, right_slope=0.25)
    assert d.lipschitz == pytest.approx(1.5)
    assert d.infimum == 0.0
    assert math.isinf(d.supremum) and not d.bounded
    np.testing.assert_allclose(d(np.array([-3.0, -0.5, 1.0, 4.0])), [2.0, 0.5, 1.5, 3.5])
    assert d.derivative(0.0, -1) == pytest.approx(-1.0)
    assert d.derivative(0.0, +1) == pytest.approx(1.5)


def test_affine_and_two_sided_evaluate():
    np.testing.assert_allclose(Affine(1.0, -2.0)(np.array([0.0, 1.5])), [1.0, -2.0])
    l = TwoSidedLinear(2.0, 0.5, 3.0, 1.0)
    np.testing.assert_allclose(l(np.array([-2.0, 0.0, 2.0])), [5.0, 2.0, 3.0])


@settings(max_examples=50, deadline=None)
@given(
    h=st.floats(0.1, 5.0), p=st.floats(0.1, 5.0),
    x=st.floats(-50, 50, allow_nan=False),
)
def test_running_cost_vanishes_at_origin(h, p, x):
    spec = benchmark_default(h=h, p=p)
    assert eval_f(spec, 0.0) == 0.0
    assert eval_f(spec, x) >= 0.0
