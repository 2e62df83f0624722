import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import waterfill
from mcuapa.barrier import BarrierSettings, newton_direction, phase1, solve
from mcuapa.dcp import AffineConstraints, ConvexProgram, LogRateConstraints
from mcuapa.errors import PreconditionError, SolverFailure


def lp(c, A, b, eq_A=None, eq_b=None):
    """max c @ z s.t. A z <= b."""
    A = np.asarray(A, float)
    return ConvexProgram(len(c), np.asarray(c, float),
                         [AffineConstraints(A, -np.asarray(b, float), [("r", (k,)) for k in range(len(b))])],
                         eq_A, eq_b)


def test_lp_corner():
    # max x + y s.t. x + 2y <= 4, 3x + y <= 6, x, y >= 0 -> (1.6, 1.2)
    prog = lp([1, 1], [[1, 2], [3, 1], [-1, 0], [0, -1]], [4, 6, 0, 0])
    res = solve(prog, np.array([0.1, 0.1]))
    assert res.status == "optimal"
    assert res.objective == pytest.approx(2.8, abs=1e-7)
    assert res.gap_bound <= BarrierSettings().eps_gap
    assert np.allclose(res.z_star, [1.6, 1.2], atol=1e-6)


@given(st.lists(st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=5))
def test_box_optimum_is_the_signed_corner(c):
    k = len(c)
    A = np.vstack([np.eye(k), -np.eye(k)])
    prog = lp(c, A, np.ones(2 * k))
    res = solve(prog, np.zeros(k))
    assert res.objective == pytest.approx(np.sum(np.abs(c)), abs=1e-7)
    assert np.allclose(res.z_star, np.sign(c), atol=1e-6)


def test_equality_constraint_is_respected():
    # max x s.t. x + y = 1, 0 <= x, y <= 1 -> x = 1
    A = np.vstack([np.eye(2), -np.eye(2)])
    prog = lp([1, 0], A, [1, 1, 0, 0], np.array([[1.0, 1.0]]), np.array([1.0]))
    res = solve(prog, np.array([0.5, 0.5]))
    assert res.objective == pytest.approx(1.0, abs=1e-7)
    assert abs(res.z_star.sum() - 1) < 1e-9


def waterfill_program(c, w):
    """Epigraph form: max sum t, t_k <= w_k log2(1 + c_k p_k), p >= 0, sum p <= 1."""
    k = len(c)
    dim = 2 * k
    P, T = np.arange(k), np.arange(k) + k
    A = np.zeros((k + 1, dim))
    A[np.arange(k), P] = -1.0
    A[k, P] = 1.0
    b = np.concatenate([np.zeros(k), [-1.0]])
    fams = [AffineConstraints(A, b, [("box", (i,)) for i in range(k + 1)]),
            LogRateConstraints(dim, P, T, w, c, [("rate", (i,)) for i in range(k)], square=False)]
    obj = np.zeros(dim)
    obj[T] = 1.0
    return ConvexProgram(dim, obj, fams)


@pytest.mark.parametrize("seed", range(6))
def test_water_filling_matches_bisection(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 9))
    c = rng.uniform(0.1, 50, k)
    w = rng.uniform(0.1, 1, k)
    prog = waterfill_program(c, w)
    p0 = np.full(k, 0.5 / k)
    z0 = np.concatenate([p0, w * np.log2(1 + c * p0) - 1])
    res = solve(prog, z0)
    _, best = waterfill(c, w)
    assert res.objective == pytest.approx(best, rel=1e-5)


def test_phase1_finds_interior_point():
    prog = lp([1, 1], [[1, 2], [3, 1], [-1, 0], [0, -1]], [4, 6, 0, 0])
    ph = phase1(prog, np.array([10.0, -5.0]))
    assert ph.status == "feasible"
    assert np.all(prog.eval(ph.z) < 0)


def test_phase1_certifies_infeasibility():
    # x <= 0 and x >= 1
    prog = lp([1.0], [[1.0], [-1.0]], [0.0, -1.0])
    assert phase1(prog, np.array([0.5])).status == "infeasible"


def test_solve_requires_strict_feasibility():
    prog = lp([1.0], [[1.0], [-1.0]], [1.0, 0.0])
    with pytest.raises(PreconditionError):
        solve(prog, np.array([1.0]))


def test_newton_direction_matches_linear_solve_and_regularizes():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(4, 4))
    H = M @ M.T + np.eye(4)
    g = rng.normal(size=4)
    step, dec = newton_direction(H, g)
    assert np.allclose(step, -np.linalg.solve(H, g))
    assert dec == pytest.approx(g @ np.linalg.solve(H, g))
    # singular but PSD: handled by the diagonal shift
    step, _ = newton_direction(np.diag([1.0, 0.0]) + 1e-300, np.array([1.0, 0.0]))
    assert np.all(np.isfinite(step))
    with pytest.raises(SolverFailure):
        newton_direction(-np.eye(2), np.ones(2))


def test_trace_and_early_stop(tmp_path):
    prog = lp([1, 1], [[1, 2], [3, 1], [-1, 0], [0, -1]], [4, 6, 0, 0])
    path = tmp_path / "trace.csv"
    res = solve(prog, np.array([0.1, 0.1]), trace_path=path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "objective", "decrement_sq", "step"]
    assert len(rows) - 1 == res.newton_iters_total
    early = solve(prog, np.array([0.1, 0.1]), stop=lambda z, gap: gap < 1e-2)
    assert early.status == "early" and early.gap_bound < 1e-2


def test_settings_validation():
    with pytest.raises(ValueError):
        BarrierSettings(mu=1.0)
    with pytest.raises(ValueError):
        BarrierSettings(eps_gap=0)
    with pytest.raises(ValueError):
        BarrierSettings(ls_alpha=0.6)
