import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fixed_scn, make_scn
from mcuapa.barrier import phase1
from mcuapa.ccp import init_feasible
from mcuapa.dcp import (AssociatedRateConstraints, LogRateConstraints, build_op4, dc_split,
                        linearize_fraction, taylor_f)
from mcuapa.errors import DomainError, PreconditionError
from mcuapa.model import InstanceConfig, LiftedPoint

finite = st.floats(-1e3, 1e3, allow_nan=False)
unit = st.floats(0.0, 1.0)


@given(finite, finite)
def test_dc_split_difference_is_product(x, p):
    a, b = dc_split(x, p)
    assert a - b == pytest.approx(x * p, rel=1e-9, abs=1e-9)
    assert a >= 0 and b >= 0


@given(unit, unit, unit, unit)
def test_taylor_f_is_a_tangent_minorant(x, p, xd, pd):
    assert taylor_f(x, p, xd, pd) <= (x - p) ** 2 + 1e-12
    assert taylor_f(xd, pd, xd, pd) == pytest.approx((xd - pd) ** 2, abs=1e-15)


@given(st.floats(0, 10), st.floats(1e-3, 10), st.floats(0, 10), st.floats(1e-3, 10))
def test_linearize_fraction_is_a_tangent_minorant(v, s, vd, sd):
    assert linearize_fraction(v, s, vd, sd) <= v * v / s * (1 + 1e-12) + 1e-12
    assert linearize_fraction(vd, sd, vd, sd) == pytest.approx(vd * vd / sd, rel=1e-12)


def test_linearize_fraction_rejects_tiny_denominator():
    with pytest.raises(DomainError):
        linearize_fraction(1.0, 1.0, 1.0, 0.0)


def _fd_jac(fam, z, h=1e-6):
    J = np.zeros((len(fam), z.size))
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        J[:, i] = (fam.eval(z + e) - fam.eval(z - e)) / (2 * h)
    return J


def _fd_hess(fam, z, k, h=1e-6):
    H = np.zeros((z.size, z.size))
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        H[:, i] = (fam.grad_k(z + e, k) - fam.grad_k(z - e, k)) / (2 * h)
    return H


def _relerr(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


@pytest.mark.parametrize("form", ["exact", "dropped"])
def test_op4_derivatives_match_finite_differences(form):
    scn = make_scn(2, 3, seed=4)
    cfg = InstanceConfig.equal(3)
    pt = init_feasible(scn, cfg, spread=0.5)
    prog = build_op4(scn, cfg, pt, rate_form=form)
    z = phase1(prog, prog.layout.pack(pt)).z
    for fam in prog.constraints:
        assert _relerr(fam.jac(z).toarray(), _fd_jac(fam, z)) < 1e-5
        if fam.hess_entries(z, np.ones(len(fam))) is None:
            continue
        for k in range(len(fam)):
            assert _relerr(fam.hess_k(z, k), _fd_hess(fam, z, k)) < 1e-5


@given(st.integers(0, 10**6))
def test_rate_family_derivatives_random_points(seed):
    rng = np.random.default_rng(seed)
    k = 3
    dim = 3 * k
    X, P, V = np.arange(k), np.arange(k) + k, np.arange(k) + 2 * k
    a = rng.uniform(0.1, 1, k)
    c = rng.uniform(1, 5000, k)
    z = np.concatenate([rng.uniform(0.05, 1, k), rng.uniform(0.01, 1, k), rng.uniform(0, 2, k)])
    for fam in (AssociatedRateConstraints(dim, X, P, V, a, c, [("C9", (i,)) for i in range(k)]),
                LogRateConstraints(dim, P, V, a, c, [("C12", (i,)) for i in range(k)])):
        assert _relerr(fam.jac(z).toarray(), _fd_jac(fam, z, 1e-7)) < 1e-5
        w = rng.uniform(0.5, 2, k)
        H = fam.hess(z, w)
        Hfd = sum(w[i] * _fd_hess(fam, z, i, 1e-7) for i in range(k))
        assert _relerr(H, Hfd) < 1e-5


def test_exact_rate_constraint_is_infinite_outside_domain():
    fam = AssociatedRateConstraints(3, [0], [1], [2], [1.0], [2.0], [("C9", (0,))])
    assert fam.eval(np.array([0.0, 0.5, 0.1]))[0] == np.inf
    assert np.isfinite(fam.eval(np.array([1e-3, 0.5, 0.1]))[0])


def test_op4_layout_and_labels():
    scn = make_scn(3, 4, seed=3)
    cfg = InstanceConfig.equal(4)
    pt = init_feasible(scn, cfg)
    prog = build_op4(scn, cfg, pt)
    K = int(scn.in_coverage.sum())
    assert prog.dim == 4 * K
    names = {lab[0] for lab in prog.labels()}
    assert {"C1lo", "C1hi", "C2", "C4lo", "C4hi", "C7", "C10", "C11", "C9"} <= names
    assert "C12" in {lab[0] for lab in build_op4(scn, cfg, pt, rate_form="dropped").labels()}
    assert "C7" not in {lab[0] for lab in build_op4(
        scn, InstanceConfig.equal(4, enforce_qos=False), pt).labels()}
    back = prog.layout.unpack(prog.layout.pack(pt))
    assert np.allclose(back.x, pt.x) and np.allclose(back.p, pt.p)


def test_op4_objective_is_sum_u():
    scn = make_scn(2, 3, seed=2)
    cfg = InstanceConfig.equal(3)
    pt = init_feasible(scn, cfg)
    prog = build_op4(scn, cfg, pt)
    assert prog.objective @ prog.layout.pack(pt) == pytest.approx(pt.u.sum(), rel=1e-12)


def test_minorants_are_tangent_at_the_linearization_point():
    # rebuilt budget and tangent-plane rows equal the true functions at their own point
    scn = make_scn(2, 4, seed=9)
    cfg = InstanceConfig.equal(4)
    pt = init_feasible(scn, cfg, spread=0.5)
    prog = build_op4(scn, cfg, pt)
    z = prog.layout.pack(pt)
    budget = prog.constraints[1].eval(z)
    xp = (pt.x * pt.p / scn.params.p_max_mw).sum(axis=0) - 1.0
    assert np.allclose(budget, xp, atol=1e-12)
    g = prog.eval(z)
    labs = prog.labels()
    s = pt.x.sum(axis=0)
    for r, (name, idx) in enumerate(labs):
        if name == "C11":
            i, j = idx
            assert g[r] == pytest.approx(pt.u[i, j] - pt.v[i, j] ** 2 / s[j], abs=1e-12)


def test_point_violating_boxes_is_rejected():
    scn = fixed_scn([[0, 0], [100, 0]], [[10, 0], [90, 0]])
    cfg = InstanceConfig.equal(2)
    bad = LiftedPoint(np.full((2, 2), 1.2), np.full((2, 2), 100.0), np.zeros((2, 2)),
                      np.zeros((2, 2)))
    with pytest.raises(PreconditionError) as err:
        build_op4(scn, cfg, bad)
    assert err.value.violations


def test_dump_lists_every_constraint():
    scn = make_scn(2, 2, seed=1)
    cfg = InstanceConfig.equal(2)
    prog = build_op4(scn, cfg, init_feasible(scn, cfg))
    text = prog.dump()
    body = [ln for ln in text.splitlines()
            if not ln.startswith(("dim", "objective", "eq "))]
    assert len(body) == prog.n_ineq
    assert text.startswith(f"dim {prog.dim}\n")
