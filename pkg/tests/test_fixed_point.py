import io
import math
import warnings

import numpy as np
import pytest

from randimpulse.exceptions import InsufficientData, NoConvergence, RandImpulseError
from randimpulse.fixed_point import (
    OuterConfig,
    estimate_contraction,
    flat_region_width,
    hjb_residual,
    lambda_sweep,
    randomized_step,
    rel_l2_error,
    solve_classical,
    solve_randomized,
)
from randimpulse.grid_fd import Grid1D, GridFn, discretize_generator
from randimpulse.model import Constant, LambdaPair, ModelSpec, benchmark_default

LAM = LambdaPair(0.5, 0.5)


def test_iterates_decrease_monotonically(randomized_run):
    res, iterates = randomized_run
    for a, b in zip(iterates, iterates[1:]):
        assert np.all(b.values <= a.values + 1e-9)
    assert max(res.increases) <= 1e-9


def test_iterates_stay_in_lipschitz_class(randomized_run, spec):
    _, iterates = randomized_run
    h = iterates[0].grid.h
    bound = spec.value_slope_bound + 10 * h
    for it in iterates:
        assert np.max(np.abs(np.diff(it.values[1:-1]) / h)) <= bound


def test_geometric_rate_and_residual(randomized):
    assert randomized.q_hat < 1 and randomized.r_squared > 0.98
    assert randomized.residual < 1e-6
    assert all(a > b for a, b in zip(randomized.iterates[1:], randomized.iterates[2:]))


def test_one_more_step_is_negligible(randomized, spec, grid):
    cfg = OuterConfig()
    new, _ = randomized_step(randomized.psi, spec, LAM, discretize_generator(spec, grid), cfg)
    assert new.sup_diff(randomized.psi) < 2 * cfg.tol_outer


def test_intensity_positive_and_low_near_origin(randomized):
    pi = randomized.pi_star
    assert np.all(pi.values > 0)
    assert pi(0.0) < pi(3.0) and pi(0.0) < pi(-3.0)


def test_randomized_value_below_never_intervening(randomized):
    assert np.all(randomized.psi.values <= randomized.psi0.values + 1e-9)


def test_prohibitive_fixed_cost_keeps_feynman_kac(grid):
    spec = benchmark_default(K_plus=1e6, K_minus=1e6)
    res = solve_randomized(spec, LAM, grid)
    np.testing.assert_allclose(res.psi.values, res.psi0.values, atol=1e-5)


def test_classical_zero_running_cost():
    spec = ModelSpec(Constant(0.03), Constant(0.2), 0.1, Constant(0.0), benchmark_default().intervention_cost)
    res = solve_classical(spec, Grid1D(-8, 8, 401))
    np.testing.assert_allclose(res.psi.values, 0.0, atol=1e-12)


def test_classical_threshold_structure(classical):
    cont = classical.grid.nodes[classical.continuation]
    idx = np.flatnonzero(classical.continuation)
    assert np.all(np.diff(idx) == 1)
    assert cont[0] < 0 < cont[-1]
    assert classical.q_hat < 1
    assert classical.residual < 1e-6


def test_lower_bound_against_classical(randomized, classical, spec):
    assert np.all(randomized.psi.values >= classical.psi.values - LAM.lambda1 / spec.discount - 1e-6)


def test_hjb_residual_closed_form():
    grid = Grid1D(-1, 1, 21)
    spec = ModelSpec(Constant(0.03), Constant(0.2), 0.1, Constant(0.0), benchmark_default().intervention_cost)
    zero = GridFn(grid, np.zeros(grid.n))
    m = GridFn(grid, np.full(grid.n, 2.0))
    assert hjb_residual(zero, m, spec, 0.5) == pytest.approx(0.5 * math.exp(-2.0 / 0.5), rel=1e-12)


def test_hjb_residual_detects_perturbation(randomized, spec):
    bumped = randomized.psi.with_values(randomized.psi.values + 0.1)
    res = hjb_residual(bumped, randomized.m_psi, spec, LAM.lambda1)
    assert res > 0.1 * spec.discount


def test_contraction_fit_exact_geometric():
    q, r2 = estimate_contraction([0.5 ** n for n in range(1, 12)])
    assert q == pytest.approx(0.5, rel=1e-12) and r2 == pytest.approx(1.0, abs=1e-12)


def test_contraction_fit_constant_is_flagged():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = estimate_contraction([1.0] * 6)
    assert fit.q_hat == 1.0 and fit.flagged
    assert caught


@pytest.mark.parametrize("seq", [[1.0, 0.5, 0.25], [1.0, 0.5, 0.0, 0.1, 0.01]])
def test_contraction_fit_needs_positive_data(seq):
    with pytest.raises(InsufficientData):
        estimate_contraction(seq)


def test_outer_cap_raises_with_history(spec):
    with pytest.raises(NoConvergence) as info:
        solve_randomized(spec, LAM, Grid1D(-8, 8, 201), OuterConfig(max_outer=3))
    assert len(info.value.history) == 3


def test_sweep_single_entry_and_error_isolation(spec, classical, grid):
    report = lambda_sweep(spec, [LAM], grid, classical=classical)
    assert len(report) == 1 and report.entries[0].error is None
    assert report.entries[0].lower_bound_ok
    small = Grid1D(-8, 8, 201)
    failing = lambda_sweep(spec, [LAM, (1.0, 1.0)], small, OuterConfig(max_outer=2),
                           classical=solve_classical(spec, small))
    assert all(e.error and "NoConvergence" in e.error for e in failing.entries)
    assert all(math.isnan(v) for v in failing.rel_errors)


def test_sweep_csv(spec, classical, grid):
    report = lambda_sweep(spec, [LAM], grid, classical=classical)
    buf = io.StringIO()
    report.write_csv(buf)
    lines = buf.getvalue().split("\n")
    assert lines[0] == ",".join(report.CSV_FIELDS)
    assert float(lines[1].split(",")[2]) == report.entries[0].rel_l2_error


def test_rel_l2_and_flat_width():
    grid = Grid1D(-4, 4, 801)
    ref = GridFn(grid, 1.0 + grid.nodes ** 2)
    assert rel_l2_error(ref, ref) == 0.0
    assert rel_l2_error(lambda x: 1.1 * (1.0 + x ** 2), ref) == pytest.approx(0.1, rel=1e-12)
    step = GridFn(grid, np.where(np.abs(grid.nodes) < 1.0, 0.0, 1.0))
    assert flat_region_width(step) == pytest.approx(2.0, abs=2 * grid.h)


def test_grid_refinement_is_first_order(spec):
    sols = {n: solve_randomized(spec, LAM, Grid1D(-8, 8, n)).psi for n in (601, 1201, 2401)}
    coarse = sols[601].grid
    x = coarse.nodes[coarse.window(-4, 4)]
    d1 = np.max(np.abs(sols[601](x) - sols[1201](x)))
    d2 = np.max(np.abs(sols[1201](x) - sols[2401](x)))
    assert d1 <= 4 * d2
    assert d2 < d1


def test_jump_law_only_for_randomized(classical):
    with pytest.raises(RandImpulseError):
        classical.jump_law(0.0)
