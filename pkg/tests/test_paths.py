import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpbsde import _rng
from jumpbsde.forward import PureJumpSpec, brownian_path, simulate_pure_jump
from jumpbsde.paths import (
    CadlagPath,
    GridMismatchError,
    PathEnsemble,
    TimeGrid,
    bracket_values,
    discrete_bracket,
    jump_measure,
    load_ensemble,
    orthogonality_test,
    read_ensemble_csv,
    save_ensemble,
    write_ensemble_csv,
)


@st.composite
def paths(draw, max_steps=24):
    steps = draw(st.integers(1, max_steps))
    grid = TimeGrid.uniform(draw(st.floats(0.25, 4.0)), steps)
    base = draw(st.lists(st.floats(-5, 5), min_size=steps + 1, max_size=steps + 1))
    idx = draw(st.sets(st.integers(1, steps), max_size=steps))
    sizes = draw(st.lists(st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3), min_size=len(idx), max_size=len(idx)))
    jumps = [(float(grid.points[i]), s) for i, s in zip(sorted(idx), sizes)]
    return CadlagPath.from_parts(grid, np.array(base), jumps)


# -- TimeGrid / CadlagPath ---------------------------------------------------


def test_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.1, 0.5]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.5]))
    with pytest.raises(ValueError):
        TimeGrid.uniform(1.0, 0)


def test_grid_refinement_and_index():
    g = TimeGrid.uniform(1.0, 4)
    r = g.with_points([0.3, 0.5 + 1e-14])
    assert r.contains(g) and len(r) == 6
    assert r.index(0.3) == 2
    with pytest.raises(KeyError):
        g.index(0.3)


def test_path_rejects_off_grid_and_zero_jumps():
    g = TimeGrid.uniform(1.0, 4)
    with pytest.raises(KeyError):
        CadlagPath(g, np.zeros(5), [0.3], [1.0])
    with pytest.raises(ValueError):
        CadlagPath(g, np.zeros(5), [0.5], [0.0])
    with pytest.raises(ValueError):
        CadlagPath(g, np.zeros(4))


@given(paths())
def test_left_limits_plus_jumps_is_value(p):
    np.testing.assert_allclose(p.left_limits() + p.jump_array(), p.values, atol=1e-12)


@given(paths())
def test_from_parts_round_trip(p):
    q = CadlagPath.from_parts(p.grid, p.continuous_part(), p.jumps)
    np.testing.assert_allclose(q.values, p.values, atol=1e-12)
    np.testing.assert_array_equal(q.jump_times, p.jump_times)


@given(paths())
def test_left_at_matches_left_limits_on_grid(p):
    np.testing.assert_allclose(p.left_at(p.grid.points[1:]), p.left_limits()[1:], atol=1e-12)


@given(paths())
def test_bracket_symmetric_and_nonnegative(p):
    q = CadlagPath(p.grid, np.cos(p.values))
    assert discrete_bracket(p, q) == pytest.approx(discrete_bracket(q, p))
    assert discrete_bracket(p, p) >= 0.0


# -- jump_measure -------------------------------------------------------------


def test_jump_measure_continuous_path_is_empty():
    g = TimeGrid.uniform(1.0, 8)
    assert len(jump_measure(CadlagPath(g, np.linspace(0, 1, 9)))) == 0


def test_jump_measure_single_jump():
    g = TimeGrid.uniform(1.0, 4)
    p = CadlagPath.from_parts(g, np.zeros(5), [(0.5, 2.0)])
    assert jump_measure(p).atoms == [(0.5, 2.0)]


def test_jump_measure_matches_pure_jump_event_log():
    spec = PureJumpSpec.from_generator([0.2, 0.8], [[-1.0, 1.0], [2.0, -2.0]], 0.2)
    grid = TimeGrid.uniform(3.0, 30)
    r = next(r for r in (simulate_pure_jump(spec, grid, s) for s in range(100)) if len(r.mu) == 3)
    m = jump_measure(r.path)
    np.testing.assert_array_equal(m.times, r.mu.times)
    # the simulator logs post-jump states; jump sizes are successive differences
    states = np.concatenate([[spec.x0], r.mu.marks])
    np.testing.assert_allclose(m.marks, np.diff(states), atol=1e-15)


# -- brackets -----------------------------------------------------------------


def test_bracket_of_constant_is_zero():
    g = TimeGrid.uniform(1.0, 10)
    x = CadlagPath.constant(g, 3.0)
    y = CadlagPath(g, np.sin(g.points))
    assert discrete_bracket(x, y) == 0.0


def test_bracket_of_brownian_is_horizon():
    n = 10_000
    g = TimeGrid.uniform(1.0, n)
    w = CadlagPath(g, brownian_path(g, _rng.stream(99, _rng.BROWNIAN)))
    # Var(sum dW^2) = 2 sum dt^2 = 2 T^2 / N
    sd = np.sqrt(2.0 / n)
    assert abs(discrete_bracket(w, w) - 1.0) < 5 * sd


def test_bracket_of_pure_jumps_is_sum_of_squares():
    g = TimeGrid.uniform(1.0, 4)
    x = CadlagPath.from_parts(g, np.zeros(5), [(0.25, 2.0), (0.75, -1.0)])
    assert discrete_bracket(x, x) == 5.0


def test_bracket_grid_mismatch():
    a = CadlagPath.constant(TimeGrid.uniform(1.0, 4), 0.0)
    b = CadlagPath.constant(TimeGrid.uniform(1.0, 5), 0.0)
    with pytest.raises(GridMismatchError):
        discrete_bracket(a, b)


# -- orthogonality ------------------------------------------------------------


def _brownian_ensemble(grid, n, master):
    return np.stack([brownian_path(grid, _rng.stream(_rng.path_seed(master, i), _rng.BROWNIAN)) for i in range(n)])


def test_orthogonality_zero_process_passes():
    g = TimeGrid.uniform(1.0, 16)
    w = _brownian_ensemble(g, 50, 1)
    r = orthogonality_test(np.zeros_like(w), w)
    assert r.mean == 0.0 and r.passed


def test_orthogonality_brownian_with_itself_fails():
    g = TimeGrid.uniform(1.0, 64)
    w = _brownian_ensemble(g, 200, 2)
    r = orthogonality_test(w, w)
    assert r.mean == pytest.approx(1.0, abs=0.1) and not r.passed


def test_orthogonality_compensated_jumps_against_independent_brownian():
    spec = PureJumpSpec.from_generator([0.2, 0.8], [[-1.0, 1.0], [2.0, -2.0]], 0.2)
    g = TimeGrid.uniform(1.0, 64)
    y = np.stack([simulate_pure_jump(spec, g, _rng.path_seed(3, i)).path.restrict(g) for i in range(1000)])
    w = _brownian_ensemble(g, 1000, 4)
    assert orthogonality_test(y, w).passed


def test_orthogonality_needs_thirty_paths():
    g = TimeGrid.uniform(1.0, 4)
    with pytest.raises(ValueError):
        orthogonality_test(np.zeros((29, 5)), np.zeros((29, 5)))


def test_orthogonality_shape_mismatch():
    with pytest.raises(GridMismatchError):
        orthogonality_test(np.zeros((40, 5)), np.zeros((40, 6)))


def test_bracket_values_rowwise():
    x = np.array([[0.0, 1.0, 3.0], [0.0, -1.0, -1.0]])
    np.testing.assert_array_equal(bracket_values(x, x), [5.0, 1.0])


# -- serialization ------------------------------------------------------------


def _ensemble():
    spec = PureJumpSpec.from_generator([0.2, 0.8], [[-1.0, 1.0], [2.0, -2.0]], 0.2)
    g = TimeGrid.uniform(1.0, 8)
    seeds = [_rng.path_seed(5, i) for i in range(12)]
    return PathEnsemble(g, tuple(simulate_pure_jump(spec, g, s).path for s in seeds), tuple(seeds))


def _same(a: PathEnsemble, b: PathEnsemble):
    assert a.grid == b.grid and a.seeds == b.seeds
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p.grid.points, q.grid.points)
        np.testing.assert_array_equal(p.values, q.values)
        np.testing.assert_array_equal(p.jump_times, q.jump_times)
        np.testing.assert_array_equal(p.jump_sizes, q.jump_sizes)


def test_npz_round_trip(tmp_path):
    e = _ensemble()
    save_ensemble(e, tmp_path / "e.npz")
    _same(e, load_ensemble(tmp_path / "e.npz"))


def test_csv_round_trip_is_exact(tmp_path):
    e = _ensemble()
    write_ensemble_csv(e, tmp_path / "csv")
    _same(e, read_ensemble_csv(tmp_path / "csv"))


def test_ensemble_requires_distinct_seeds_and_shared_grid():
    g = TimeGrid.uniform(1.0, 4)
    p = CadlagPath.constant(g, 0.0)
    with pytest.raises(ValueError):
        PathEnsemble(g, (p, p), (1, 1))
    with pytest.raises(GridMismatchError):
        PathEnsemble(TimeGrid.uniform(1.0, 8), (p,), (1,))


@settings(max_examples=25)
@given(st.integers(0, 2**32))
def test_brownian_dyadic_coupling(seed):
    fine = TimeGrid.uniform(1.0, 16)
    coarse = TimeGrid.uniform(1.0, 4)
    wf = brownian_path(fine, _rng.stream(seed, _rng.BROWNIAN))
    wc = brownian_path(coarse, _rng.stream(seed, _rng.BROWNIAN))
    np.testing.assert_array_equal(wf[::4], wc)
