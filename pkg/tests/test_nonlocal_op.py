import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import benchmark_closed_form, exact_classical_M, exact_randomized_M
from randimpulse.exceptions import InvalidSpec, NonFinite, WindowTooSmall
from randimpulse.grid_fd import GridFn
from randimpulse.model import Constant, TwoSidedLinear, benchmark_default, eval_l
from randimpulse.nonlocal_op import (
    GibbsJumpSampler,
    JumpSearchConfig,
    QuadratureRule,
    classical_M,
    gibbs_density,
    jump_gibbs,
    randomized_M,
    sample_jump,
)
from strategies import kinks, lipschitz_pl

SPEC = benchmark_default()


def cost(xi):
    return eval_l(SPEC, xi)


def zero(y):
    return np.zeros(np.shape(y))


def absolute(y):
    return np.abs(y)


@pytest.mark.parametrize("rule", [QuadratureRule.gauss_hermite(64), QuadratureRule.uniform(8.0, 4001)])
def test_rules_integrate_normal_moments(rule):
    assert rule.weights.sum() == pytest.approx(1.0, abs=1e-14)
    assert rule.expect(rule.nodes) == pytest.approx(0.0, abs=1e-12)
    assert rule.expect(rule.nodes ** 2) == pytest.approx(1.0, abs=1e-10)
    assert rule.expect(rule.nodes ** 4) == pytest.approx(3.0, abs=1e-9)


def test_rule_rejects_nonpositive_weights():
    with pytest.raises(InvalidSpec):
        QuadratureRule(np.array([0.0, 1.0]), np.array([1.0, 0.0]))


@pytest.mark.parametrize("x", [-3.0, 0.0, 0.7, 5.0])
def test_classical_of_zero_is_fixed_cost(x):
    value, xi = classical_M(zero, x, SPEC)
    assert value == pytest.approx(2.0, abs=1e-9)
    assert xi == pytest.approx(0.0, abs=1e-7)


def test_classical_absolute_value_jumps_to_origin():
    value, xi = classical_M(absolute, 5.0, SPEC)
    ref_value, ref_xi = exact_classical_M(absolute, [0.0], 5.0, cost)
    assert (ref_value, ref_xi) == (4.5, -5.0)
    assert value == pytest.approx(ref_value, abs=1e-8)
    assert xi == pytest.approx(ref_xi, abs=1e-6)


def test_classical_shift_moves_value_only():
    v1, a1 = classical_M(absolute, 3.0, SPEC)
    v2, a2 = classical_M(lambda y: np.abs(y) + 1.25, 3.0, SPEC)
    assert v2 - v1 == pytest.approx(1.25, abs=1e-12)
    assert a2 == pytest.approx(a1, abs=1e-9)


def test_classical_window_too_small():
    with pytest.raises(WindowTooSmall):
        classical_M(lambda y: -5.0 * np.abs(y), 0.0, SPEC, JumpSearchConfig(pad=2.0, n_scan=201))


def test_classical_array_input_matches_scalar():
    xs = np.array([-4.0, -1.0, 2.5])
    values, argmins = classical_M(absolute, xs, SPEC)
    for x, v, a in zip(xs, values, argmins):
        sv, sa = classical_M(absolute, float(x), SPEC)
        assert v == pytest.approx(sv, abs=1e-12) and a == pytest.approx(sa, abs=1e-9)


def test_randomized_of_zero_matches_closed_form():
    assert benchmark_closed_form(0.5) == pytest.approx(2.3239, abs=5e-5)
    assert randomized_M(zero, 0.0, 0.5, SPEC) == pytest.approx(benchmark_closed_form(0.5), abs=5e-6)


def test_randomized_constant_cost_is_that_constant():
    flat = benchmark_default(K_plus=3.0, K_minus=3.0, k_plus=0.0, k_minus=0.0)
    for lam in (0.05, 1.0, 20.0):
        for x in (-2.0, 0.0, 4.0):
            assert randomized_M(zero, x, lam, flat) == pytest.approx(3.0, abs=1e-12)


@pytest.mark.parametrize("lam", [1.0, 0.5, 0.1, 0.05])
@pytest.mark.parametrize("x", [-3.3, 0.0, 1.3, 4.0])
def test_randomized_matches_exact_piecewise_linear(lam, x):
    # the worst case is two kinks stacked at the origin with lam = 0.05 (about 6e-5)
    got = randomized_M(absolute, x, lam, SPEC)
    assert got == pytest.approx(exact_randomized_M(absolute, [0.0], x, lam, cost), abs=1e-4)


def test_randomized_matches_exact_on_grid_function(psi0):
    for lam in (0.5, 0.05):
        xs = np.linspace(-4, 4, 9)
        got = randomized_M(psi0, xs, lam, SPEC)
        ref = [exact_randomized_M(psi0, psi0.grid.nodes, x, lam, cost) for x in xs]
        np.testing.assert_allclose(got, ref, atol=5e-5)


def test_gauss_hermite_is_less_accurate_than_default():
    ref = exact_randomized_M(absolute, [0.0], 1.3, 0.1, cost)
    gh = abs(randomized_M(absolute, 1.3, 0.1, SPEC, QuadratureRule.gauss_hermite(64)) - ref)
    default = abs(randomized_M(absolute, 1.3, 0.1, SPEC) - ref)
    assert default < gh


def test_randomized_rejects_bad_input():
    with pytest.raises(InvalidSpec):
        randomized_M(zero, 0.0, 0.0, SPEC)
    with pytest.raises(NonFinite):
        randomized_M(lambda y: np.where(y > 1, np.inf, 0.0), 0.0, 0.5, SPEC)


def test_randomized_small_lambda_does_not_overflow():
    v = randomized_M(lambda y: 50.0 + np.abs(y), 3.0, 0.01, SPEC)
    assert math.isfinite(v)


# -- operator invariants --------------------------------------------------------------------

PROPS = settings(max_examples=40, deadline=None)
xs_strategy = st.floats(-5.0, 5.0)
lam_strategy = st.sampled_from([0.05, 0.1, 0.5, 1.0, 2.0])


@PROPS
@given(phi=lipschitz_pl(coercive=True), x=xs_strategy, lam=lam_strategy)
def test_domination_by_classical(phi, x, lam):
    assert randomized_M(phi, x, lam, SPEC) >= classical_M(phi, x, SPEC)[0] - 1e-6


@PROPS
@given(phi=lipschitz_pl(), x=xs_strategy, lam=st.floats(0.05, 2.0), factor=st.floats(1.01, 5.0))
def test_monotone_in_lambda(phi, x, lam, factor):
    assert randomized_M(phi, x, lam, SPEC) <= randomized_M(phi, x, lam * factor, SPEC) + 1e-10


@PROPS
@given(p1=lipschitz_pl(), p2=lipschitz_pl(), x=xs_strategy, lam=lam_strategy)
def test_non_expansive(p1, p2, x, lam):
    z = np.linspace(-12, 12, 24001)
    gap = np.max(np.abs(p1(z) - p2(z)))
    assert abs(randomized_M(p1, x, lam, SPEC) - randomized_M(p2, x, lam, SPEC)) <= gap + 1e-10


@PROPS
@given(phi=lipschitz_pl(), bump=st.floats(0.0, 3.0), x=xs_strategy, lam=lam_strategy)
def test_monotone_operator(phi, bump, x, lam):
    upper = lambda y: phi(y) + bump * np.exp(-np.asarray(y) ** 2)
    assert randomized_M(phi, x, lam, SPEC) <= randomized_M(upper, x, lam, SPEC) + 1e-10


@PROPS
@given(phi=lipschitz_pl(), x=xs_strategy, y=xs_strategy, lam=lam_strategy)
def test_lipschitz_in_state(phi, x, y, lam):
    diff = abs(randomized_M(phi, x, lam, SPEC) - randomized_M(phi, y, lam, SPEC))
    assert diff <= SPEC.lip_l * abs(x - y) + 2e-6


@PROPS
@given(phi=lipschitz_pl(), c=st.floats(-20.0, 20.0), x=xs_strategy, lam=lam_strategy)
def test_translation_equivariance(phi, c, x, lam):
    shifted = randomized_M(lambda y: phi(y) + c, x, lam, SPEC)
    assert shifted - randomized_M(phi, x, lam, SPEC) == pytest.approx(c, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(phi=lipschitz_pl(coercive=True), x=xs_strategy, lam=lam_strategy)
def test_quadrature_matches_exact_oracle(phi, x, lam):
    # non-coercive integrands put their mass beyond the truncated rule; excluded here
    ref = exact_randomized_M(phi, kinks(phi), x, lam, cost)
    assert randomized_M(phi, x, lam, SPEC) == pytest.approx(ref, abs=1e-4)


def test_soft_min_gap_shrinks_with_lambda(randomized):
    psi = randomized.psi
    xs = np.linspace(-4, 4, 81)
    hard = classical_M(psi, xs, SPEC)[0]
    gaps = [np.max(np.abs(randomized_M(psi, xs, lam, SPEC) - hard)) for lam in (1.0, 0.5, 0.1, 0.05)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


# -- Gibbs jump law -------------------------------------------------------------------------


def test_gibbs_density_of_constant_is_one():
    flat = benchmark_default(K_plus=2.0, K_minus=2.0, k_plus=0.0, k_minus=0.0)
    g = jump_gibbs(zero, 1.5, 0.3, flat)
    np.testing.assert_allclose(gibbs_density(g, np.linspace(-5, 3, 17)), 1.0, atol=1e-12)


@pytest.mark.parametrize("x", [-2.0, 0.0, 2.0])
@pytest.mark.parametrize("lam", [0.05, 0.5])
def test_gibbs_density_normalized_under_rule(randomized, x, lam):
    rule = QuadratureRule.uniform(8.0, 4001)
    g = jump_gibbs(randomized.psi, x, lam, SPEC, rule)
    mass = rule.expect(gibbs_density(g, rule.nodes - x))
    assert mass == pytest.approx(1.0, abs=1e-8)


def test_gibbs_mode_near_classical_argmin(randomized):
    psi = randomized.psi
    g = randomized.jump_law(2.0)
    xi = np.linspace(-6, 2, 16001)
    dens = gibbs_density(g, xi) * np.exp(-0.5 * (xi + 2.0) ** 2)
    _, argmin = classical_M(psi, 2.0, SPEC)
    assert abs(xi[np.argmax(dens)] - argmin) <= 0.2


def test_sampler_of_constant_is_prior():
    flat = benchmark_default(K_plus=2.0, K_minus=2.0, k_plus=0.0, k_minus=0.0)
    g = jump_gibbs(zero, 1.5, 0.3, flat)
    draws = sample_jump(g, np.random.default_rng(1), 100_000)
    assert abs(draws.mean() + 1.5) < 3 * draws.std() / math.sqrt(draws.size)


def test_sampler_large_lambda_recovers_unit_variance(psi0):
    g = jump_gibbs(psi0, 1.0, 1e3, SPEC)
    draws = sample_jump(g, np.random.default_rng(2), 100_000)
    assert draws.var() == pytest.approx(1.0, rel=0.05)


def test_sampler_variance_shrinks_with_lambda(psi0):
    rng = np.random.default_rng(3)
    wide = sample_jump(jump_gibbs(psi0, 2.0, 0.5, SPEC), rng, 100_000)
    narrow = sample_jump(jump_gibbs(psi0, 2.0, 0.05, SPEC), rng, 100_000)
    assert narrow.var() < wide.var()


def test_batched_sampler_agrees_with_table(randomized):
    psi = randomized.psi
    sampler = GibbsJumpSampler(psi, 0.5, SPEC)
    u = np.linspace(0.01, 0.99, 25)
    for x in (-2.0, 0.5, 3.0):
        xi, cdf = randomized.jump_law(x).table
        np.testing.assert_allclose(sampler.sample(np.full(u.size, x), u), np.interp(u, cdf, xi), atol=5e-3)
        logz = sampler.log_normalizer(np.array([x]))[0]
        assert logz == pytest.approx(jump_gibbs(psi, x, 0.5, SPEC).log_normalizer, abs=1e-5)


def test_batched_sampler_log_density_consistent(randomized):
    sampler = GibbsJumpSampler(randomized.psi, 0.5, SPEC)
    x = np.array([-1.0, 2.0])
    xi, logd = sampler.sample(x, np.array([0.3, 0.8]), return_log_density=True)
    np.testing.assert_allclose(logd, sampler.log_density(x, xi), atol=1e-12)


def test_gibbs_moments_match_sample(randomized):
    g = randomized.jump_law(2.0)
    mean, var = g.moments()
    draws = sample_jump(g, np.random.default_rng(4), 200_000)
    assert draws.mean() == pytest.approx(mean, abs=4 * math.sqrt(var / draws.size))
    assert draws.var() == pytest.approx(var, rel=0.03)
