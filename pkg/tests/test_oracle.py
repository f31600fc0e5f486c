import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpbsde.oracle import (
    FiniteStateValue,
    GeneratorMatrix,
    OracleCache,
    OracleError,
    SmallCase,
    enumerate_cases,
    exhaustive_small_path_check,
    finite_state_table,
    gaussian_heat_v,
    linear_driver_v,
    matrix_exponential_v,
    pde_reference_v,
    pdmp_deterministic_v,
    rk4_backward_v,
    scenario_hash,
)

Q2 = GeneratorMatrix(np.array([[-1.0, 1.0], [2.0, -2.0]]), np.array([0.2, 0.8]))


def gauss(x):
    return np.exp(-np.asarray(x, dtype=float) ** 2 / 2)


@st.composite
def generators(draw):
    n = draw(st.integers(2, 6))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    q = rng.uniform(0.0, 2.0, (n, n))
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return GeneratorMatrix(q, np.arange(n, dtype=float)), rng.normal(size=n)


# -- generator matrices -----------------------------------------------------------


def test_generator_validation():
    with pytest.raises(OracleError):
        GeneratorMatrix(np.array([[-1.0, 1.0]]), np.array([0.0, 1.0]))
    with pytest.raises(OracleError):
        GeneratorMatrix(np.array([[1.0, -1.0], [1.0, -1.0]]), np.array([0.0, 1.0]))
    with pytest.raises(OracleError):
        GeneratorMatrix(np.array([[-1.0, 1.0], [1.0, -1.0 + 1e-9]]), np.array([0.0, 1.0]))


# -- matrix exponential -------------------------------------------------------------


def test_terminal_time_returns_g():
    g = np.array([0.3, -1.2])
    np.testing.assert_allclose(matrix_exponential_v(Q2, g, 1.0, 1.0), g, atol=1e-15)


def test_zero_generator_returns_g():
    q = GeneratorMatrix(np.zeros((3, 3)), np.array([0.0, 1.0, 2.0]))
    g = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(matrix_exponential_v(q, g, 0.0, 5.0), g)


def test_time_after_horizon():
    with pytest.raises(OracleError):
        matrix_exponential_v(Q2, np.zeros(2), 2.0, 1.0)


def test_two_state_closed_form_and_rk4():
    v = matrix_exponential_v(Q2, np.array([0.0, 1.0]), 0.0, 1.0)
    # exp(Q) for eigenvalues 0 and -3: P01 = (1 - e^-3) / 3, P11 = (1 + 2 e^-3) / 3
    np.testing.assert_allclose(v, [(1 - math.exp(-3)) / 3, (1 + 2 * math.exp(-3)) / 3], rtol=1e-14)
    np.testing.assert_allclose(rk4_backward_v(Q2, np.array([0.0, 1.0]), 0.0, 1.0), v, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(generators())
def test_expm_agrees_with_rk4(case):
    q, g = case
    np.testing.assert_allclose(matrix_exponential_v(q, g, 0.0, 1.0), rk4_backward_v(q, g, 0.0, 1.0), atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(generators(), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-0.5, 0.5))
def test_linear_driver_agrees_with_rk4(case, c0, cx, a, cu):
    q, g = case
    lin = dict(c0=c0, cx=cx, a=a, cu=cu)
    np.testing.assert_allclose(linear_driver_v(q, g, 1.0, **lin), rk4_backward_v(q, g, 0.0, 1.0, **lin), atol=1e-8)


def test_finite_state_value_interpolates_table():
    v = FiniteStateValue(Q2, np.array([0.2, 0.8]), 1.0, nodes=64, cx=1.0, a=0.5)
    t = np.array([0.0, 0.123, 0.5, 0.987])
    exact = finite_state_table(Q2, np.array([0.2, 0.8]), 1.0, t, cx=1.0, a=0.5)
    np.testing.assert_allclose(v(t[:, None], np.array([[0.2, 0.8]])), exact, atol=1e-9)
    with pytest.raises(OracleError):
        v(0.0, 0.5)


# -- Crank-Nicolson ------------------------------------------------------------------


def test_pde_without_dynamics_returns_g():
    tab = pde_reference_v(lambda x: 0.0, lambda x: 0.0, gauss, -4.0, 4.0, 80, 1.0, 20)
    for row in tab.values:
        np.testing.assert_allclose(row, gauss(tab.xs), atol=1e-15)


def _heat_error(nx, nt):
    tab = pde_reference_v(lambda x: 0.0, lambda x: 1.0, gauss, -10.0, 10.0, nx, 1.0, nt)
    return float(np.max(np.abs(tab.values[0] - gaussian_heat_v(0.0, tab.xs, 1.0))))


def test_heat_equation_matches_gaussian_convolution():
    assert _heat_error(800, 200) < 1e-4


def test_heat_equation_second_order():
    errs = [_heat_error(100 * 2**k, 25 * 2**k) for k in range(3)]
    ratios = [errs[k] / errs[k + 1] for k in range(2)]
    for r in ratios:
        assert 3.0 < r < 5.0


def test_pde_derivative_is_consistent():
    tab = pde_reference_v(lambda x: 0.0, lambda x: 1.0, gauss, -10.0, 10.0, 800, 1.0, 200)
    x = np.linspace(-2, 2, 41)
    # d/dx of the Gaussian convolution: -x / (1 + tau) * v
    exact = -x / 2.0 * gaussian_heat_v(0.0, x, 1.0)
    np.testing.assert_allclose(tab.dv_dx(0.0, x), exact, atol=1e-3)


def _black_call(t, x, T=1.0, mu=0.05, vol=0.3):
    # undiscounted E[(X_T - 1)^+] for geometric Brownian motion from (t, x)
    tau = T - t
    fwd = x * math.exp(mu * tau)
    d1 = (math.log(fwd) + 0.5 * vol**2 * tau) / (vol * math.sqrt(tau))
    d2 = d1 - vol * math.sqrt(tau)
    cdf = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))  # noqa: E731
    return fwd * cdf(d1) - cdf(d2)


def test_pde_matches_black_formula():
    b = lambda x: 0.05 * np.asarray(x)  # noqa: E731
    sig = lambda x: 0.3 * np.asarray(x)  # noqa: E731
    tab = pde_reference_v(b, sig, lambda x: np.maximum(np.asarray(x) - 1.0, 0.0), 0.0, 6.0, 600, 1.0, 400)
    for t in (0.0, 0.5):
        for x in (0.7, 1.0, 1.4):
            assert float(tab(t, x)) == pytest.approx(_black_call(t, x), abs=2e-4)


# the coarse grid also overshoots the range of g, which is warned about separately
@pytest.mark.filterwarnings("ignore:Crank-Nicolson solution leaves")
def test_pde_warns_on_cell_peclet():
    with pytest.warns(UserWarning, match="monotonicity"):
        pde_reference_v(lambda x: 5.0, lambda x: 0.1, gauss, -4.0, 4.0, 20, 1.0, 20)


# -- deterministic PDMP ----------------------------------------------------------------


def test_pdmp_value_without_driver_is_terminal_at_flow_end():
    v = pdmp_deterministic_v(lambda x: 1.0, lambda b: 0.5, lambda x: x, 2.0)
    # from 0.5 at unit speed: hits 1 at 0.5, 1.0 and 1.5, restarts at 0.5, ends at 1.0
    assert v(0.0, 0.5) == pytest.approx(1.0, abs=1e-9)
    assert v(1.9, 0.2) == pytest.approx(0.3, abs=1e-9)


def test_pdmp_value_with_linear_driver():
    # f = a y, T = 1.2, from 0.5: hits at 0.5 and 1.0, X_T = 0.7; the clock
    # part grows by e^(a T) backward and each hit divides by (1 - a)
    a = 0.3
    v = pdmp_deterministic_v(lambda x: 1.0, lambda b: 0.5, lambda x: x, 1.2, f=lambda s, x, y: a * y)
    assert v(0.0, 0.5) == pytest.approx(0.7 * math.exp(a * 1.2) / (1 - a) ** 2, rel=1e-9)


def test_pdmp_value_matches_bsde_closed_form():
    # T = 2 from 0.5: hits at 0.5, 1.0 and 1.5; the arrival at 1 exactly at T is no hit
    a = -0.3
    v = pdmp_deterministic_v(lambda x: 1.0, lambda b: 0.5, lambda x: x, 2.0, f=lambda s, x, y: a * y)
    assert v(0.0, 0.5) == pytest.approx(math.exp(2 * a) / (1 - a) ** 3, rel=1e-9)


# -- exhaustive enumeration ------------------------------------------------------------


def test_case_enumeration_counts():
    # 2 interior marks + 2 boundary points = 4 kinds; sum_n C(3, n) 4^n = 5^3
    assert len(enumerate_cases(3)) == 125
    assert len(enumerate_cases(3, boundary=False)) == 27


def test_no_events_reduces_to_zero():
    rep = exhaustive_small_path_check("transfer", max_events=0)
    assert rep.n_cases == 1 and rep.passed


def test_interior_and_boundary_event():
    cases = []

    def collect(case):
        cases.append(case)
        return None

    exhaustive_small_path_check(collect, max_events=2, times=(0.25, 0.75))
    mixed = [c for c in cases if sorted(k for _, k, _ in c.events) == ["boundary", "interior"]]
    assert len(mixed) == 2 * 2 * 2  # both orders, two marks, two boundary points
    assert exhaustive_small_path_check("transfer", max_events=2, times=(0.25, 0.75)).passed


def test_transfer_exhaustive():
    rep = exhaustive_small_path_check("transfer", max_events=3)
    assert rep.n_cases == 125 and rep.passed, rep.failures[:3]


def test_telescoping_exhaustive():
    rep = exhaustive_small_path_check("telescoping", max_events=3)
    assert rep.n_cases == 27 and rep.passed, rep.failures[:3]


def test_custom_check_reports_failures():
    rep = exhaustive_small_path_check(lambda c: {"n": len(c.events)} if len(c.events) == 3 else None, max_events=3, boundary=False)
    assert not rep.passed and len(rep.failures) == 8


def test_enumeration_is_capped():
    with pytest.raises(OracleError):
        exhaustive_small_path_check("transfer", max_events=4)
    with pytest.raises(ValueError):
        exhaustive_small_path_check("other")


def test_small_case_states():
    c = SmallCase(((0.25, "interior", 0.75), (0.5, "boundary", 1.0)))
    assert c.states() == [(0.25, 0.5, 0.75), (0.5, 1.0, 0.5)]


# -- cache --------------------------------------------------------------------------------


def test_scenario_hash_ignores_key_order():
    assert scenario_hash({"a": 1, "b": [1, 2]}) == scenario_hash({"b": [1, 2], "a": 1})
    assert scenario_hash({"a": 1}) != scenario_hash({"a": 2})


def test_cache_computes_once(tmp_path):
    cache = OracleCache(tmp_path / "cache")
    calls = []

    def compute():
        calls.append(1)
        return {"v": [1.0, 2.0]}

    key = {"scenario": "two_state", "T": 1.0}
    assert cache.get_or_compute(key, compute) == {"v": [1.0, 2.0]}
    assert cache.get_or_compute(key, compute) == {"v": [1.0, 2.0]}
    assert len(calls) == 1
    assert json.loads(cache.path(key).read_text()) == {"v": [1.0, 2.0]}
