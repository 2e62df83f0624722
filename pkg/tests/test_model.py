import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fixed_scn, make_scn
from mcuapa.errors import InfeasibleInstanceError
from mcuapa.model import (InstanceConfig, LiftedPoint, Solution, association_pattern,
                          check_op1, lift_to_op3, nearest_association, repair_columns,
                          weighted_objective)
from mcuapa.scenario import user_rates


def test_instance_config_validation():
    with pytest.raises(ValueError):
        InstanceConfig([0.5, 0.6])
    with pytest.raises(ValueError):
        InstanceConfig([1.0, 0.0])
    with pytest.raises(ValueError):
        InstanceConfig([1.0], max_assoc=0)
    cfg = InstanceConfig.equal(7)
    assert cfg.weights.sum() == 1.0
    assert cfg.limit(5) == 5 and InstanceConfig.equal(3, max_assoc=2).limit(5) == 2


def test_solution_integral_flag_checks_binary():
    with pytest.raises(ValueError):
        Solution([[0.5]], [[1.0]], integral=True)
    s = Solution([[1.0]], [[2.0]], integral=True, tags=("x",))
    back = Solution.from_dict(s.to_dict())
    assert np.array_equal(back.x, s.x) and np.array_equal(back.p, s.p) and back.tags == ("x",)


def two_by_two():
    return fixed_scn([[0, 0], [100, 0]], [[10, 0], [90, 0]])


def test_check_op1_clean_solution():
    scn = two_by_two()
    cfg = InstanceConfig.equal(2)
    sol = Solution(np.eye(2), np.eye(2) * 1000, integral=True)
    rep = check_op1(scn, cfg, sol)
    assert rep.ok and str(rep) == "feasible"


def test_check_op1_flags_each_constraint():
    scn = two_by_two()
    cfg = InstanceConfig.equal(2, max_assoc=1)
    x = np.array([[1.0, 1.0], [0.0, 0.0]])
    p = np.array([[900.0, 1200.0], [0.0, 0.0]])
    ids = check_op1(scn, cfg, Solution(x, p, integral=True)).ids()
    assert {"C2", "L", "C4", "C5"} <= ids
    empty_col = Solution([[1.0, 0.0], [1.0, 0.0]], [[10.0, 0.0], [10.0, 0.0]], integral=True)
    assert "C3" in check_op1(scn, cfg, empty_col).ids()
    frac = check_op1(scn, cfg, Solution([[0.5, 0.5], [-0.1, 1.1]], np.ones((2, 2))))
    assert "C1" in frac.ids()


def test_check_op1_qos_only_when_enforced():
    scn = two_by_two()
    sol = Solution(np.eye(2), np.eye(2) * 1e-9, integral=True)
    assert "C6" in check_op1(scn, InstanceConfig.equal(2), sol).ids()
    assert check_op1(scn, InstanceConfig.equal(2, enforce_qos=False), sol).ok


def test_check_op1_coverage():
    scn = fixed_scn([[0, 0], [95, 0]], [[10, 0], [90, 0]], radius=20)
    x = np.array([[1.0, 1.0], [0.0, 1.0]])
    assert "COV" in check_op1(scn, InstanceConfig.equal(2), Solution(x, x * 100)).ids()


def test_weighted_objective_matches_rates():
    scn = make_scn(3, 4, seed=2)
    cfg = InstanceConfig([0.1, 0.2, 0.3, 0.4])
    x = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0]], float)
    p = x * 300
    assert weighted_objective(scn, cfg, Solution(x, p)) == pytest.approx(
        cfg.weights @ user_rates(scn, x, p), rel=1e-14)


@given(st.integers(0, 10**6))
def test_lift_is_tight_and_reproduces_objective(seed):
    rng = np.random.default_rng(seed)
    scn = make_scn(3, 4, seed=seed % 97)
    cfg = InstanceConfig.equal(4)
    x = rng.uniform(0.05, 1, (4, 3))
    p = rng.uniform(0, 1000, (4, 3))
    pt = lift_to_op3(scn, cfg, Solution(x, p))
    W = scn.params.bandwidth_hz
    assert W * pt.u.sum() == pytest.approx(weighted_objective(scn, cfg, Solution(x, p)), rel=1e-10)
    se = np.log2(1 + scn.snr_coeff * p)
    assert np.allclose(pt.v ** 2, x * cfg.weights[:, None] * se, rtol=1e-12)
    assert np.allclose(pt.u, pt.v ** 2 / x.sum(axis=0), rtol=1e-12)


def test_lifted_point_rejects_nan():
    with pytest.raises(ValueError):
        LiftedPoint([[np.nan]], [[1]], [[0]], [[0]])


def test_pattern_forces_singletons():
    scn = fixed_scn([[0, 0], [95, 0]], [[10, 0], [90, 0], [50, 0]], radius=45)
    pat = association_pattern(scn, InstanceConfig.equal(3))
    # users 0 and 1 each see a single mBS; user 2 sees none within 45 m
    assert pat.fixed_one[0, 0] and pat.fixed_one[1, 1]


def test_pattern_rejects_uncovered_user():
    scn = fixed_scn([[0, 0], [95, 0]], [[10, 0], [90, 0]], radius=20)
    with pytest.raises(InfeasibleInstanceError):
        association_pattern(scn, InstanceConfig.equal(2), fixed=[[0, -1], [-1, -1]])


def test_pattern_cap_removes_remaining_pairs():
    scn = fixed_scn([[0, 0], [95, 0]], [[10, 0], [90, 0]])
    cfg = InstanceConfig.equal(2, max_assoc=1)
    pat = association_pattern(scn, cfg, fixed=[[1, -1], [-1, -1]])
    assert not pat.active[0, 1]
    assert pat.fixed_one[1, 1]  # column 1 now has a single admissible user
    with pytest.raises(InfeasibleInstanceError):
        association_pattern(scn, cfg, fixed=[[1, 1], [-1, -1]])


def test_pattern_row_bounds():
    scn = make_scn(3, 4, seed=1)
    pat = association_pattern(scn, InstanceConfig.equal(4, max_assoc=1))
    assert np.all(pat.row_eq)
    pat = association_pattern(scn, InstanceConfig.equal(4))
    assert np.all(pat.row_lo == 1) and np.all(np.isinf(pat.row_hi))


def test_nearest_association():
    scn = fixed_scn([[0, 0], [50, 0], [100, 0]], [[10, 0], [60, 0]])
    x = nearest_association(scn, 2)
    assert x.tolist() == [[1, 1, 0], [0, 1, 1]]
    assert nearest_association(scn, 1).tolist() == [[1, 0, 0], [0, 1, 0]]


def test_repair_columns_takes_from_a_shared_mbs():
    allowed = np.ones((3, 3), bool)
    x = np.array([[1.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0]])
    score = np.array([[3.0, 2.0, 1.0], [3.0, 1.0, 2.0], [3.0, 0.0, 0.0]])
    out = repair_columns(x, score, 1, allowed)
    # mBS 1 takes its best-scored user, mBS 2 the best remaining one
    assert out.tolist() == [[0, 1, 0], [0, 0, 1], [1, 0, 0]]
    assert np.all(out.sum(axis=0) >= 1) and np.all(out.sum(axis=1) == 1)
    with pytest.raises(InfeasibleInstanceError):
        repair_columns(np.array([[1.0, 0, 0]]), np.ones((1, 3)), 1, np.ones((1, 3), bool))
