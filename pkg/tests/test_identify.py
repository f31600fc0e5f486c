import numpy as np
import pytest

from jumpbsde.bsde import DriverSpec, solution_from_value, solve_regression
from jumpbsde.forward import JumpDiffusionSpec, PdmpSpec, PureJumpSpec, simulate_ensemble
from jumpbsde.identify import (
    ValueFunction,
    chain_rule_remainder,
    compute_h,
    driver_drift,
    h_atom_rmse,
    h_atom_table,
    identify_z,
    increment_field,
    k_decomposition,
    verify_vanishing,
)
from jumpbsde.kernels import MarkKernel
from jumpbsde.measure import PredictableField, l2_norm
from jumpbsde.oracle import FiniteStateValue, GeneratorMatrix
from jumpbsde.paths import TimeGrid
from jumpbsde.runner import CHECKS, Run

STATES = [0.2, 0.8]
Q = [[-1.0, 1.0], [2.0, -2.0]]
TWO_STATE = PureJumpSpec.from_generator(STATES, Q, 0.2)
MARTINGALE = JumpDiffusionSpec(b=lambda x: 0.0, sigma=lambda x: 1.0, gamma=lambda x, e: e, levy=MarkKernel.point(1.0, 1.0), x0=0.0, lipschitz_K=1.0)
POISSON = JumpDiffusionSpec(b=lambda x: 0.0, sigma=lambda x: 0.0, gamma=lambda x, e: e, levy=MarkKernel.point(1.0, 1.0), x0=0.0)
BROWNIAN = JumpDiffusionSpec(b=lambda x: 0.0, sigma=lambda x: 1.0, x0=0.0)
PDMP_JUMPY = PdmpSpec(h=lambda x: 1.0, lam=lambda x: 1.0, beta=lambda x: 0.5, x0=0.5, P=MarkKernel.point(0.3, 1.0), lam_bound=1.0)

IDENTITY_V = ValueFunction(lambda t, x: np.asarray(x, dtype=float), lambda t, x: np.ones(np.broadcast(t, x).shape))
SQUARE_V = ValueFunction(lambda t, x: np.asarray(x, dtype=float) ** 2, lambda t, x: 2 * np.asarray(x, dtype=float) * np.ones(np.broadcast(t, x).shape))


def smooth_v(t, x):
    return np.sin(np.asarray(x, dtype=float)) * np.exp(-0.5 * np.asarray(t, dtype=float)) + 0.3 * np.asarray(x, dtype=float) ** 2


SMOOTH_V = ValueFunction(smooth_v, lambda t, x: np.cos(np.asarray(x)) * np.exp(-0.5 * np.asarray(t)) + 0.6 * np.asarray(x))


@pytest.fixture(scope="module")
def chain_ensemble():
    return simulate_ensemble(TWO_STATE, TimeGrid.uniform(1.0, 50), 2000, 201)


@pytest.fixture(scope="module")
def jd_ensemble():
    return simulate_ensemble(MARTINGALE, TimeGrid.uniform(1.0, 20), 400, 202)


@pytest.fixture(scope="module")
def pdmp_ensemble():
    return simulate_ensemble(PDMP_JUMPY, TimeGrid.uniform(2.0, 40), 200, 203)


def chain_oracle():
    return FiniteStateValue(GeneratorMatrix(np.array(Q), np.array(STATES)), np.array(STATES), 1.0)


# -- value functions ----------------------------------------------------------


def test_provenance_is_validated():
    with pytest.raises(ValueError):
        ValueFunction(lambda t, x: x, provenance="guess")
    for p in ("oracle", "closed-form", "regression-fit"):
        ValueFunction(lambda t, x: x, provenance=p)


def test_gradient_check_on_probe_grid():
    err, ok = SMOOTH_V.gradient_check(np.linspace(0, 1, 100), np.linspace(-2, 2, 100))
    assert ok and err < 1e-4


def test_gradient_check_catches_wrong_derivative():
    bad = ValueFunction(smooth_v, lambda t, x: np.cos(np.asarray(x)) * np.exp(-0.5 * np.asarray(t)))
    err, ok = bad.gradient_check(np.linspace(0, 1, 100), np.linspace(-2, 2, 100))
    assert not ok and err > 0.1


def test_gradient_check_needs_derivative():
    with pytest.raises(ValueError):
        ValueFunction(smooth_v).gradient_check([0.0], [0.0])


# -- Z ------------------------------------------------------------------------


def test_identify_z_martingale_solver(jd_ensemble):
    sol = solve_regression(jd_ensemble, DriverSpec(lambda x: np.asarray(x, dtype=float)), order=2, u_order=0)
    res = identify_z(IDENTITY_V, sol, jd_ensemble, lambda t, x: np.ones(np.shape(x)))
    assert res.passed and res.statistic < 1e-6


def test_identify_z_invariant_under_constant_shift(jd_ensemble):
    sol = solve_regression(jd_ensemble, DriverSpec(lambda x: np.asarray(x, dtype=float)), order=2, u_order=0)
    ratio = lambda t, x: np.ones(np.shape(x))  # noqa: E731
    a = identify_z(IDENTITY_V, sol, jd_ensemble, ratio)
    b = identify_z(IDENTITY_V.shifted(7.5), sol, jd_ensemble, ratio)
    assert a.statistic == b.statistic


def test_identify_z_against_pde_value(scenario):
    run = Run(scenario("black_scholes"))
    assert run.value.provenance == "oracle"
    res = CHECKS["identify_z"].fn(run, 5e-2, {})
    assert res.passed and res.statistic < 5e-2


def test_identify_z_without_diffusion_is_zero():
    ens = simulate_ensemble(POISSON, TimeGrid.uniform(1.0, 20), 50, 204)
    sol = solution_from_value(IDENTITY_V, ens, IDENTITY_V.dv_dx, lambda x: np.zeros(np.shape(x)))
    assert np.all(sol.z == 0.0)
    res = identify_z(IDENTITY_V, sol, ens, lambda t, x: np.zeros(np.shape(x)))
    assert res.statistic == 0.0 and res.passed


def test_identify_z_needs_derivative(jd_ensemble):
    sol = solution_from_value(IDENTITY_V, jd_ensemble, IDENTITY_V.dv_dx, lambda x: np.ones(np.shape(x)))
    with pytest.raises(ValueError):
        identify_z(ValueFunction(IDENTITY_V.v), sol, jd_ensemble, lambda t, x: 1.0)


# -- H and its vanishing --------------------------------------------------------


def test_exact_increment_gives_zero_h(chain_ensemble):
    v = chain_oracle()
    vf = ValueFunction(v, provenance="oracle")
    u = increment_field(vf, chain_ensemble[0].gamma_tilde)
    h = compute_h(u, vf, chain_ensemble[0].gamma_tilde, chain_ensemble[0])
    for r in chain_ensemble.realizations[:50]:
        assert np.all(h.atom_values(r) == 0.0)
    res = verify_vanishing(h, chain_ensemble)
    assert res.passed and res.extra["g2_of_H"] == 0.0 and res.extra["terminal_mean"] == 0.0


def test_zero_h_passes(jd_ensemble):
    h = compute_h(PredictableField.zero(), ValueFunction(lambda t, x: np.zeros(np.shape(x))), jd_ensemble[0].gamma_tilde)
    res = verify_vanishing(h, jd_ensemble)
    assert res.passed and res.statistic == 0.0 and res.extra["stderr"] == 0.0


def test_unit_h_on_poisson_fails():
    ens = simulate_ensemble(POISSON, TimeGrid.uniform(1.0, 20), 400, 205)
    zero_v = ValueFunction(lambda t, x: np.zeros(np.shape(x)))
    h = compute_h(PredictableField.constant(1.0), zero_v, ens[0].gamma_tilde)
    res = verify_vanishing(h, ens)
    # C(1)_T is the compensator mass Lambda T = 1 on every path
    assert res.extra["g2_of_H"] == pytest.approx(1.0, rel=1e-9)
    assert not res.passed


def test_verify_vanishing_needs_paths():
    ens = simulate_ensemble(POISSON, TimeGrid.uniform(1.0, 20), 99, 206)
    h = compute_h(PredictableField.zero(), IDENTITY_V, ens[0].gamma_tilde)
    with pytest.raises(ValueError):
        verify_vanishing(h, ens)


def test_solver_u_identifies_with_oracle_increments(chain_ensemble):
    sol = solve_regression(chain_ensemble, DriverSpec(lambda x: np.asarray(x, dtype=float)), basis="indicator", states=STATES)
    vf = ValueFunction(chain_oracle(), provenance="oracle")
    h = compute_h(sol, vf, chain_ensemble[0].gamma_tilde)
    assert h_atom_rmse(h, chain_ensemble).statistic < 0.1
    assert verify_vanishing(h, chain_ensemble).passed


def test_h_atom_table_rows(chain_ensemble):
    vf = ValueFunction(chain_oracle(), provenance="oracle")
    h = compute_h(PredictableField.constant(0.5), vf, chain_ensemble[0].gamma_tilde)
    ens = chain_ensemble.realizations[:10]
    rows = h_atom_table(h, ens)
    assert len(rows) == sum(len(r.mu) for r in ens)
    assert set(rows[0]) == {"path", "time", "mark", "x_left", "tag", "H"}


def test_pdmp_boundary_h_equals_u(pdmp_ensemble):
    u = PredictableField(lambda s, e, x: np.sin(3 * np.asarray(s)) + np.asarray(e) * np.asarray(x))
    h = compute_h(u, SMOOTH_V, pdmp_ensemble[0].gamma_tilde)
    seen = 0
    for r in pdmp_ensemble.realizations[:40]:
        vals = h.atom_values(r)
        x = np.atleast_1d(r.path.left_at(r.mu.times))
        for j, tag in enumerate(r.tags):
            if tag == "boundary":
                assert vals[j] == u(r.mu.times[j], r.mu.marks[j], x[j])
                seen += 1
    assert seen > 0


# -- K decomposition ------------------------------------------------------------


def test_k_decomposition_without_k_reduces_to_l2(jd_ensemble):
    h = compute_h(PredictableField(lambda s, e, x: np.asarray(e) * np.cos(np.asarray(x))), SMOOTH_V, jd_ensemble[0].gamma_tilde)
    kd = k_decomposition(h, jd_ensemble)
    assert kd.l_fit == [] and kd.on_k_residual == 0.0
    assert kd.off_k_l2 == pytest.approx(l2_norm(h.field, jd_ensemble).value, rel=1e-12)


def test_k_decomposition_point_kernel_residual_is_zero(pdmp_ensemble):
    h = compute_h(PredictableField(lambda s, e, x: np.asarray(s) + np.asarray(x) ** 2), SMOOTH_V, pdmp_ensemble[0].gamma_tilde)
    kd = k_decomposition(h, pdmp_ensemble)
    assert kd.on_k_residual == 0.0
    assert len(kd.l_fit) > 0 and kd.off_k_l2 > 0.0


def test_k_shift_leaves_g2_unchanged_for_point_kernels(pdmp_ensemble):
    gt = pdmp_ensemble[0].gamma_tilde
    base = PredictableField(lambda s, e, x: 0.1 * np.asarray(x) * np.cos(np.asarray(s)))
    on_k = lambda x: (np.asarray(x) <= 0.0) | (np.asarray(x) >= 1.0)  # noqa: E731
    shifted = PredictableField(lambda s, e, x: base(s, e, x) + 2.5 * on_k(x))
    a = verify_vanishing(compute_h(base, SMOOTH_V, gt), pdmp_ensemble)
    b = verify_vanishing(compute_h(shifted, SMOOTH_V, gt), pdmp_ensemble)
    assert b.extra["g2_of_H"] == pytest.approx(a.extra["g2_of_H"], rel=1e-12, abs=1e-15)


# -- chain-rule remainder -------------------------------------------------------


def test_identity_remainder_vanishes(jd_ensemble):
    rep = chain_rule_remainder(IDENTITY_V, jd_ensemble)
    assert np.max(np.abs(rep.remainder)) < 1e-12


def test_square_remainder_tracks_time():
    grid = TimeGrid.uniform(1.0, 64)
    ens = simulate_ensemble(BROWNIAN, grid, 2000, 207)
    rep = chain_rule_remainder(SQUARE_V, ens)
    a = rep.terminal
    assert abs(a.mean() - 1.0) < 3 * a.std(ddof=1) / np.sqrt(a.size) + 1e-12
    assert rep.orthogonality.passed


def test_pure_jump_remainder_needs_no_derivative(chain_ensemble):
    vf = ValueFunction(chain_oracle(), provenance="oracle")
    rep = chain_rule_remainder(vf, chain_ensemble)
    assert rep.remainder.shape == (len(chain_ensemble), chain_ensemble.grid.steps + 1)
    # finitely many jumps on every path
    assert all(np.isfinite(len(r.mu)) for r in chain_ensemble)


def test_pure_jump_remainder_is_driver_drift():
    spec = TWO_STATE
    grid = TimeGrid.uniform(1.0, 200)
    ens = simulate_ensemble(spec, grid, 200, 208)
    linear = {"cx": 1.0, "a": 0.5}
    v = FiniteStateValue(GeneratorMatrix(np.array(Q), np.array(STATES)), np.array(STATES), 1.0, **linear)
    vf = ValueFunction(v, provenance="oracle")
    rep = chain_rule_remainder(vf, ens)
    drift = driver_drift(vf, DriverSpec.linear(lambda x: x, **linear), ens)
    assert np.max(np.abs(rep.remainder - drift)) < 5e-2


def test_continuous_variant_rejected_without_diffusion(chain_ensemble):
    with pytest.raises(ValueError):
        chain_rule_remainder(ValueFunction(chain_oracle(), provenance="oracle"), chain_ensemble, continuous=True)


def test_discontinuous_variant_rejected_with_diffusion(jd_ensemble):
    with pytest.raises(ValueError):
        chain_rule_remainder(IDENTITY_V, jd_ensemble, continuous=False)


def test_continuous_variant_needs_derivative(jd_ensemble):
    with pytest.raises(ValueError):
        chain_rule_remainder(ValueFunction(IDENTITY_V.v), jd_ensemble)
