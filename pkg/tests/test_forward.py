import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from jumpbsde import _rng
from jumpbsde.forward import (
    JumpDiffusionSpec,
    PdmpSpec,
    PureJumpSpec,
    SimulationError,
    euler_maruyama,
    reconcile,
    rk4_flow,
    simulate,
    simulate_ensemble,
)
from jumpbsde.kernels import MarkKernel
from jumpbsde.measure import classify_events
from jumpbsde.paths import TimeGrid

GRID = TimeGrid.uniform(1.0, 40)
POISSON = JumpDiffusionSpec(b=lambda x: 0.0, sigma=lambda x: 0.0, gamma=lambda x, e: e, levy=MarkKernel.point(1.0, 1.0), x0=0.0, lipschitz_K=1.0)
TWO_STATE = PureJumpSpec.from_generator([0.2, 0.8], [[-1.0, 1.0], [2.0, -2.0]], 0.2)
PDMP_LINEAR = PdmpSpec(h=lambda x: 1.0, lam=lambda x: 0.0, beta=lambda x: 0.5, x0=0.5)
PDMP_MIXED = PdmpSpec(
    h=lambda x: 0.8 - x,
    lam=lambda x: 1.0 + x,
    beta=lambda x: 0.25 if x > 0.5 else 0.75,
    x0=0.3,
    P=MarkKernel.from_density(lambda e: np.ones_like(e) / 0.8, 0.1, 0.9),
    lam_bound=2.0,
)
PDMP_FAST = PdmpSpec(h=lambda x: 3.0, lam=lambda x: 1.0, beta=lambda x: 0.2, x0=0.5, P=MarkKernel.discrete([0.3, 0.6], [0.5, 0.5]), lam_bound=1.0)


# -- jump-diffusion -----------------------------------------------------------


def test_pure_brownian_has_no_atoms():
    spec = JumpDiffusionSpec(b=lambda x: 0.0, sigma=lambda x: 1.0, x0=0.0)
    r = simulate(spec, GRID, 1)
    assert len(r.mu) == 0 and r.path.jump_times.size == 0
    np.testing.assert_allclose(r.path.values, r.aux["W"], atol=1e-14)


def test_no_jumps_is_euler_maruyama_bit_for_bit():
    spec = JumpDiffusionSpec(b=lambda x: 0.3 - x, sigma=lambda x: 0.5 + 0.1 * math.sin(x), x0=0.7)
    for seed in (1, 2, 3):
        r = simulate(spec, GRID, seed)
        e = euler_maruyama(spec.b, spec.sigma, spec.x0, GRID, seed)
        np.testing.assert_array_equal(r.path.values, e.values)


def test_compensated_poisson_is_martingale():
    x0 = 1.5
    spec = dataclasses.replace(POISSON, x0=x0)
    xt = simulate_ensemble(spec, GRID, 3000, 5).values()[:, -1]
    assert abs(xt.mean() - x0) < 3 * xt.std(ddof=1) / math.sqrt(xt.size)


def test_jump_diffusion_event_sets_are_empty():
    for seed in range(5):
        r = simulate(POISSON, GRID, seed)
        ev = classify_events(r.mu, r.nu)
        assert ev.J.size == 0 and ev.K.size == 0


def test_coarse_grid_warns():
    with pytest.warns(UserWarning, match="coarse grid"):
        simulate(POISSON, TimeGrid.uniform(1.0, 5), 1)


def test_invariant_spot_check():
    bad = dataclasses.replace(POISSON, gamma=lambda x, e: 2.0 * e)
    with pytest.raises(ValueError, match="K"):
        bad.check()
    lip = dataclasses.replace(POISSON, gamma=lambda x, e: np.sin(3 * x) * np.minimum(1, np.abs(e)), lipschitz_K=1.0)
    with pytest.raises(ValueError, match="Lipschitz"):
        lip.check()
    POISSON.check()


def test_non_finite_state():
    spec = JumpDiffusionSpec(b=lambda x: 1e300 * (1 + x * x), sigma=lambda x: 0.0, x0=1.0)
    with np.errstate(over="ignore"), pytest.raises(SimulationError):
        simulate(spec, GRID, 1)


# -- pure jump ----------------------------------------------------------------


def test_zero_rates_give_constant_path():
    spec = PureJumpSpec.from_generator([0.2, 0.8], np.zeros((2, 2)), 0.8)
    r = simulate(spec, GRID, 1)
    assert len(r.mu) == 0 and np.all(r.path.values == 0.8)


def test_two_state_marginal_matches_closed_form():
    # P(X_1 = 0.8 | X_0 = 0.2) = q01 / (q01 + q10) (1 - exp(-(q01 + q10)))
    p = (1.0 - math.exp(-3.0)) / 3.0
    xt = simulate_ensemble(TWO_STATE, TimeGrid.uniform(1.0, 10), 10_000, 17).values()[:, -1]
    frac = np.mean(xt == 0.8)
    assert abs(frac - p) < 3 * math.sqrt(p * (1 - p) / xt.size)


def test_atom_count_below_thinning_bound():
    n = np.array([len(r.mu) for r in simulate_ensemble(TWO_STATE, GRID, 2000, 3)])
    assert n.mean() <= TWO_STATE.rate_bound * 1.0 + 3 * n.std(ddof=1) / math.sqrt(n.size)


def test_constant_rate_inter_event_times_are_exponential():
    r = 2.0
    spec = PureJumpSpec.from_generator([0.0, 1.0], [[-r, r], [r, -r]], 0.0)
    grid = TimeGrid.uniform(50.0, 2000)
    gaps = []
    i = 0
    while len(gaps) < 10_000:
        t = simulate(spec, grid, _rng.path_seed(8, i)).mu.times
        gaps.extend(np.diff(np.concatenate([[0.0], t])).tolist())
        i += 1
    res = stats.kstest(np.array(gaps[:10_000]), "expon", args=(0.0, 1.0 / r))
    assert res.statistic < 1.628 / math.sqrt(10_000)


def test_pure_jump_marks_are_post_jump_states():
    r = next(r for r in (simulate(TWO_STATE, GRID, s) for s in range(50)) if len(r.mu) >= 2)
    np.testing.assert_array_equal(r.path.at(r.mu.times), r.mu.marks)
    np.testing.assert_allclose(r.gamma_tilde(r.mu.times, r.mu.marks, r.path.left_at(r.mu.times)), r.path.jump_sizes)


def test_zero_bound_with_live_kernel():
    spec = PureJumpSpec(TWO_STATE.rate_kernel, 0.0, 0.2)
    with pytest.raises(ValueError):
        simulate(spec, GRID, 1)


# -- PDMP ---------------------------------------------------------------------


def test_pdmp_still_process():
    spec = PdmpSpec(h=lambda x: 0.0, lam=lambda x: 0.0, beta=lambda x: 0.5, x0=0.3)
    r = simulate(spec, GRID, 1)
    assert len(r.mu) == 0 and np.all(r.path.values == 0.3)


def test_pdmp_linear_flow_hits():
    grid = TimeGrid.uniform(2.0, 20)
    r = simulate(PDMP_LINEAR, grid, 1)
    np.testing.assert_allclose(r.mu.times, [0.5, 1.0, 1.5], atol=grid.increments[0])
    assert r.aux["pstar"].terminal == 3.0
    assert r.tags == ["boundary"] * 3
    np.testing.assert_array_equal(r.mu.marks, 0.5)
    ev = classify_events(r.mu, r.nu)
    np.testing.assert_array_equal(ev.K, r.mu.times)


def test_pdmp_compensator_atoms_equal_mu_atoms():
    for seed in range(10):
        r = simulate(PDMP_MIXED, TimeGrid.uniform(3.0, 60), seed)
        mu = dict(zip(r.mu.times.tolist(), r.mu.marks.tolist()))
        for a in r.nu.atoms:
            assert a.is_full and a.marks.size == 1
            assert mu[a.time] == a.marks[0] == PDMP_MIXED.beta(r.path.left_at(a.time))


def test_pdmp_atom_mass_is_boundary_indicator():
    for seed in range(10):
        r = simulate(PDMP_MIXED, TimeGrid.uniform(3.0, 60), seed)
        left = np.atleast_1d(r.path.left_at(r.mu.times))
        on_b = (np.abs(left) < 1e-9) | (np.abs(left - 1.0) < 1e-9)
        masses = np.array([r.nu.atom_at(t).mass if r.nu.atom_at(t) else 0.0 for t in r.mu.times])
        np.testing.assert_array_equal(masses, on_b.astype(float))


def test_pdmp_tags_disjoint_and_exhaustive():
    seen = set()
    for seed in range(10):
        r = simulate(PDMP_FAST, TimeGrid.uniform(2.0, 40), seed)
        assert len(r.tags) == len(r.mu)
        k = set(classify_events(r.mu, r.nu).K.tolist())
        for t, tag in zip(r.mu.times.tolist(), r.tags):
            assert tag in ("boundary", "interior")
            assert (tag == "boundary") == (t in k)
            seen.add(tag)
    assert seen == {"boundary", "interior"}


def test_pdmp_boundary_atoms_reconcile():
    r = simulate(PDMP_LINEAR, TimeGrid.uniform(2.0, 20), 1)
    left = np.atleast_1d(r.path.left_at(r.mu.times))
    np.testing.assert_array_equal(r.gamma_tilde(r.mu.times, r.mu.marks, left), 0.0)
    for (s, dxp), x in zip(r.xp_jumps, left):
        assert dxp == PDMP_LINEAR.beta(x) - x


def test_pdmp_rejects_bad_beta_and_start():
    with pytest.raises(ValueError):
        PdmpSpec(h=lambda x: 1.0, lam=lambda x: 0.0, beta=lambda x: 1.0, x0=0.5)
    with pytest.raises(ValueError):
        PdmpSpec(h=lambda x: 1.0, lam=lambda x: 0.0, beta=lambda x: 0.5, x0=0.0)


@pytest.mark.parametrize("a,c", [(1.0, 0.5), (-2.0, 1.0), (0.0, 0.3), (0.7, -0.2)])
def test_rk4_flow_affine_closed_form(a, c):
    x0 = 0.4
    for t in np.linspace(0.1, 1.0, 10):
        exact = x0 + c * t if a == 0 else (x0 + c / a) * math.exp(a * t) - c / a
        assert abs(rk4_flow(lambda x: a * x + c, x0, t, 200) - exact) < 1e-8


# -- reconcile ----------------------------------------------------------------


@pytest.mark.parametrize("spec", [POISSON, TWO_STATE, PDMP_MIXED, PDMP_FAST], ids=["jd", "chain", "pdmp", "pdmp_fast"])
def test_every_realization_reconciles(spec):
    grid = TimeGrid.uniform(2.0, 80)
    for i in range(15):
        assert reconcile(simulate(spec, grid, _rng.path_seed(40, i))).ok


@pytest.mark.parametrize("spec", [POISSON, TWO_STATE, PDMP_FAST], ids=["jd", "chain", "pdmp"])
def test_perturbed_mark_flags_exactly_one_violation(spec):
    grid = TimeGrid.uniform(2.0, 80)
    r = next(r for r in (simulate(spec, grid, s) for s in range(100)) if any(t == "interior" for t in r.tags))
    i = r.tags.index("interior")
    bad = dataclasses.replace(r, mu=r.mu.with_mark(i, r.mu.marks[i] + 0.05))
    v = reconcile(bad).violations
    assert len(v) == 1 and v[0]["time"] == r.mu.times[i]


# -- ensembles ----------------------------------------------------------------


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**31))
def test_ensemble_independent_of_workers(master):
    a = simulate_ensemble(PDMP_FAST, GRID, 12, master, workers=1)
    b = simulate_ensemble(PDMP_FAST, GRID, 12, master, workers=4)
    np.testing.assert_array_equal(a.values(), b.values())
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.mu.times, rb.mu.times)
        np.testing.assert_array_equal(ra.mu.marks, rb.mu.marks)


def test_streams_are_separate():
    # the Brownian path of a seed does not depend on whether jumps are switched on
    plain = simulate(JumpDiffusionSpec(b=lambda x: 0.0, sigma=lambda x: 1.0), GRID, 9)
    jumpy = simulate(dataclasses.replace(POISSON, sigma=lambda x: 1.0), GRID, 9)
    np.testing.assert_array_equal(plain.aux["W"], jumpy.aux["W"])
