"""Per-iteration convex subproblem of the convex-concave procedure.

Given a linearization point, :func:`build_op4` assembles a convex program in
the stacked variable ``z = [x, p, u, v]`` (normalized units, one entry per
admissible user/mBS pair, row-major). Three convexifications are used:

* the bilinear power budget ``x p`` is split as ``((x+p)^2 - (x-p)^2) / 4``
  and the concave part is replaced by its tangent (:func:`taylor_f`);
* the quadratic-over-linear term ``v^2 / s`` is replaced by its tangent
  plane (:func:`linearize_fraction`);
* the rate constraint ``v^2 <= x w log2(1 + c p)`` is either kept exactly
  in the convex form ``v^2 / x <= w log2(1 + c p)`` (``rate_form="exact"``)
  or used without the association factor (``rate_form="dropped"``).

All constraints are written ``g(z) <= 0``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, PreconditionError
from .model import (AssociationPattern, InstanceConfig, LiftedPoint,
                    association_pattern, normalized_coeff, normalized_rmin)
from .scenario import Scenario

__all__ = [
    "dc_split",
    "taylor_f",
    "linearize_fraction",
    "SmoothConstraint",
    "AffineConstraints",
    "ColumnPowerConstraints",
    "LogRateConstraints",
    "AssociatedRateConstraints",
    "RATE_FORMS",
    "ConvexProgram",
    "Op4Layout",
    "build_op4",
]

LN2 = math.log(2.0)
EPS_S = 1e-9
RATE_FORMS = ("exact", "dropped")


def dc_split(x, p):
    """Return ``((x+p)^2/4, (x-p)^2/4)``; their difference is ``x*p``."""
    return 0.25 * (x + p) ** 2, 0.25 * (x - p) ** 2


def taylor_f(x, p, x_dot, p_dot):
    """First-order expansion of ``(x-p)^2`` at ``(x_dot, p_dot)``.

    Never exceeds ``(x-p)^2``; equal exactly when ``x-p == x_dot-p_dot``.
    """
    d = x_dot - p_dot
    return d * d + 2.0 * d * (x - x_dot - p + p_dot)


def linearize_fraction(v, s, v_dot, s_dot):
    """Tangent plane of ``v^2 / s`` at ``(v_dot, s_dot)``.

    Underestimates ``v^2 / s`` for every ``s > 0``.
    """
    s_dot = np.asarray(s_dot, dtype=float)
    if np.any(s_dot < EPS_S):
        raise DomainError(f"linearization denominator below {EPS_S}")
    return 2.0 * v_dot * v / s_dot - v_dot ** 2 * s / s_dot ** 2


class SmoothConstraint:
    """A family of constraints ``g_k(z) <= 0`` sharing one functional form.

    The Jacobian has a fixed sparsity pattern ``(jac_rows, jac_cols)``;
    subclasses provide ``eval`` (shape ``(k,)``), ``jac_values`` aligned
    with the pattern, and ``hess_entries`` giving ``(i, j, values)`` of
    ``sum_k weights[k] * hess(g_k)`` (``None`` for affine families).
    """

    kind = "abstract"

    def __init__(self, dim, labels, jac_rows, jac_cols):
        self.dim = dim
        self.labels = list(labels)
        self.jac_rows = np.asarray(jac_rows, dtype=np.intp)
        self.jac_cols = np.asarray(jac_cols, dtype=np.intp)

    def __len__(self):
        return len(self.labels)

    def eval(self, z):
        raise NotImplementedError

    def jac_values(self, z):
        raise NotImplementedError

    def hess_entries(self, z, weights):
        return None

    def jac(self, z):
        return sp.csr_matrix((self.jac_values(z), (self.jac_rows, self.jac_cols)),
                             shape=(len(self), self.dim))

    def hess(self, z, weights):
        """Dense ``sum_k weights[k] * hess(g_k)``, or ``None`` if affine."""
        ent = self.hess_entries(z, weights)
        if ent is None:
            return None
        H = np.zeros((self.dim, self.dim))
        np.add.at(H, (ent[0], ent[1]), ent[2])
        return H

    def grad_k(self, z, k) -> np.ndarray:
        return np.asarray(self.jac(z)[k].todense()).ravel()

    def hess_k(self, z, k) -> np.ndarray:
        w = np.zeros(len(self))
        w[k] = 1.0
        h = self.hess(z, w)
        return np.zeros((self.dim, self.dim)) if h is None else h

    def describe(self, k) -> str:
        raise NotImplementedError


class AffineConstraints(SmoothConstraint):
    """``A z + b <= 0``."""

    kind = "affine"

    def __init__(self, A, b, labels):
        A = sp.csr_matrix(A)
        coo = A.tocoo()
        super().__init__(A.shape[1], labels, coo.row, coo.col)
        self.A = A
        self._vals = coo.data
        self.b = np.asarray(b, dtype=float)

    def eval(self, z):
        return self.A @ z + self.b

    def jac_values(self, z):
        return self._vals

    def describe(self, k):
        row = self.A.getrow(k)
        terms = " ".join(f"{c:+.6g}*z{j}" for j, c in zip(row.indices, row.data))
        return f"{terms} {self.b[k]:+.6g} <= 0"


class ColumnPowerConstraints(SmoothConstraint):
    """Convexified per-mBS power budget.

    For column ``j``: ``1/4 sum_i [(x+p)^2 - 2 d (x-p) + d^2] - 1 <= 0`` with
    ``d = x_dot - p_dot``, i.e. ``1/4 sum_i [(x+p)^2 - taylor_f] <= 1``.
    """

    kind = "convex_quadratic"

    def __init__(self, dim, col_of_pair, x_idx, p_idx, d, n_cols, labels):
        col = np.asarray(col_of_pair)
        xi, pi = np.asarray(x_idx), np.asarray(p_idx)
        super().__init__(dim, labels, np.concatenate([col, col]), np.concatenate([xi, pi]))
        self.col, self.xi, self.pi = col, xi, pi
        self.d = np.asarray(d, dtype=float)
        self.ncol = n_cols

    def eval(self, z):
        x, p, d = z[self.xi], z[self.pi], self.d
        per = 0.25 * ((x + p) ** 2 - 2.0 * d * (x - p) + d * d)
        return np.bincount(self.col, per, minlength=self.ncol) - 1.0

    def jac_values(self, z):
        s = 0.5 * (z[self.xi] + z[self.pi])
        return np.concatenate([s - 0.5 * self.d, s + 0.5 * self.d])

    def hess_entries(self, z, weights):
        w = 0.5 * np.asarray(weights)[self.col]
        xi, pi = self.xi, self.pi
        return (np.concatenate([xi, pi, xi, pi]), np.concatenate([xi, pi, pi, xi]),
                np.concatenate([w, w, w, w]))

    def describe(self, k):
        sel = np.nonzero(self.col == k)[0]
        parts = " ".join(f"(z{self.xi[s]},z{self.pi[s]};d={self.d[s]:.6g})" for s in sel)
        return f"0.25*sum[(x+p)^2 - 2d(x-p) + d^2] - 1 <= 0 over {parts}"


class LogRateConstraints(SmoothConstraint):
    """``v^2 - a * log2(1 + c p) <= 0`` per pair.

    With ``square=False`` the first term is ``v`` itself, which gives the
    epigraph form used for power-only re-optimization.
    """

    kind = "log_type"

    def __init__(self, dim, p_idx, v_idx, a, c, labels, square=True):
        pi, vi = np.asarray(p_idx), np.asarray(v_idx)
        k = len(pi)
        super().__init__(dim, labels, np.concatenate([np.arange(k), np.arange(k)]),
                         np.concatenate([vi, pi]))
        self.pi, self.vi = pi, vi
        self.a = np.asarray(a, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.square = square

    def eval(self, z):
        arg = 1.0 + self.c * z[self.pi]
        with np.errstate(invalid="ignore", divide="ignore"):
            lg = np.where(arg > 0, np.log(np.where(arg > 0, arg, 1.0)), np.nan)
        v = z[self.vi]
        return (v * v if self.square else v) - self.a * lg / LN2

    def jac_values(self, z):
        arg = 1.0 + self.c * z[self.pi]
        dv = 2.0 * z[self.vi] if self.square else np.ones(len(self))
        return np.concatenate([dv, -self.a * self.c / (arg * LN2)])

    def hess_entries(self, z, weights):
        w = np.asarray(weights)
        arg = 1.0 + self.c * z[self.pi]
        dpp = w * self.a * self.c ** 2 / (arg ** 2 * LN2)
        if not self.square:
            return self.pi, self.pi, dpp
        idx = np.concatenate([self.vi, self.pi])
        return idx, idx, np.concatenate([2.0 * w, dpp])

    def describe(self, k):
        lhs = f"z{self.vi[k]}^2" if self.square else f"z{self.vi[k]}"
        return f"{lhs} - {self.a[k]:.6g}*log2(1 + {self.c[k]:.6g}*z{self.pi[k]}) <= 0"


class AssociatedRateConstraints(SmoothConstraint):
    """``v^2 / x - a * log2(1 + c p) <= 0`` per pair, defined for ``x > 0``.

    Quadratic-over-linear minus a concave function, hence convex. Unlike
    :class:`LogRateConstraints` it keeps the association factor, so a pair
    with small ``x`` cannot claim the full rate of its link.
    """

    kind = "log_type"

    def __init__(self, dim, x_idx, p_idx, v_idx, a, c, labels):
        xi, pi, vi = (np.asarray(t) for t in (x_idx, p_idx, v_idx))
        k = len(pi)
        r = np.arange(k)
        super().__init__(dim, labels, np.concatenate([r, r, r]),
                         np.concatenate([vi, xi, pi]))
        self.xi, self.pi, self.vi = xi, pi, vi
        self.a = np.asarray(a, dtype=float)
        self.c = np.asarray(c, dtype=float)

    def eval(self, z):
        x, p, v = z[self.xi], z[self.pi], z[self.vi]
        arg = 1.0 + self.c * p
        ok = (x > 0) & (arg > 0)
        with np.errstate(invalid="ignore", divide="ignore"):
            val = v * v / x - self.a * np.log(arg) / LN2
        return np.where(ok, val, np.inf)

    def jac_values(self, z):
        x, p, v = z[self.xi], z[self.pi], z[self.vi]
        arg = 1.0 + self.c * p
        return np.concatenate([2.0 * v / x, -(v / x) ** 2, -self.a * self.c / (arg * LN2)])

    def hess_entries(self, z, weights):
        w = np.asarray(weights)
        x, p, v = z[self.xi], z[self.pi], z[self.vi]
        arg = 1.0 + self.c * p
        xi, pi, vi = self.xi, self.pi, self.vi
        return (np.concatenate([vi, vi, xi, xi, pi]),
                np.concatenate([vi, xi, vi, xi, pi]),
                np.concatenate([2.0 * w / x, -2.0 * w * v / x ** 2, -2.0 * w * v / x ** 2,
                                2.0 * w * v ** 2 / x ** 3,
                                w * self.a * self.c ** 2 / (arg ** 2 * LN2)]))

    def describe(self, k):
        return (f"z{self.vi[k]}^2/z{self.xi[k]} - {self.a[k]:.6g}*log2(1 + "
                f"{self.c[k]:.6g}*z{self.pi[k]}) <= 0")


@dataclass
class ConvexProgram:
    """Maximize ``objective @ z`` subject to smooth convex ``g(z) <= 0`` and
    optional linear equalities ``eq_A z = eq_b``."""

    dim: int
    objective: np.ndarray
    constraints: list
    eq_A: np.ndarray | None = None
    eq_b: np.ndarray | None = None
    layout: "Op4Layout | None" = field(default=None, repr=False)
    # rows that phase I keeps unshifted when the hint satisfies them strictly,
    # e.g. bounds that also delimit the domain of another constraint
    unshifted: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_ineq(self) -> int:
        return sum(len(c) for c in self.constraints)

    @property
    def n_eq(self) -> int:
        return 0 if self.eq_A is None else self.eq_A.shape[0]

    def eval(self, z) -> np.ndarray:
        return np.concatenate([c.eval(z) for c in self.constraints])

    def labels(self) -> list:
        return [lab for c in self.constraints for lab in c.labels]

    def max_violation(self, z) -> float:
        g = self.eval(z)
        worst = float(np.max(g)) if g.size else -np.inf
        if self.eq_A is not None:
            worst = max(worst, float(np.max(np.abs(self.eq_A @ z - self.eq_b))))
        return worst

    def dump(self, fh=None) -> str:
        """Line-oriented listing, one constraint per line::

            <kind> <label> <index> : <expression>

        preceded by ``dim``, ``objective`` and one ``eq`` line per equality.
        """
        buf = io.StringIO()
        buf.write(f"dim {self.dim}\n")
        nz = np.nonzero(self.objective)[0]
        buf.write("objective max " + " ".join(f"{self.objective[j]:+.6g}*z{j}" for j in nz) + "\n")
        for r in range(self.n_eq):
            row = self.eq_A[r]
            terms = " ".join(f"{row[j]:+.6g}*z{j}" for j in np.nonzero(row)[0])
            buf.write(f"eq {r} : {terms} = {self.eq_b[r]:.6g}\n")
        for fam in self.constraints:
            for k, (name, idx) in enumerate(fam.labels):
                buf.write(f"{fam.kind} {name} {','.join(map(str, idx))} : {fam.describe(k)}\n")
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


@dataclass(frozen=True)
class Op4Layout:
    """Maps admissible pairs to slots of the stacked vector ``[x, p, u, v]``."""

    n: int
    m: int
    rows: np.ndarray
    cols: np.ndarray
    pattern: AssociationPattern
    p_max_mw: float

    @property
    def k(self) -> int:
        return len(self.rows)

    @property
    def dim(self) -> int:
        return 4 * self.k

    def block(self, name) -> slice:
        b = "xpuv".index(name)
        return slice(b * self.k, (b + 1) * self.k)

    def pack(self, point: LiftedPoint) -> np.ndarray:
        r, c = self.rows, self.cols
        return np.concatenate([point.x[r, c], point.p[r, c] / self.p_max_mw,
                               point.u[r, c], point.v[r, c]])

    def unpack(self, z) -> LiftedPoint:
        mats = []
        for name in "xpuv":
            a = np.zeros((self.n, self.m))
            a[self.rows, self.cols] = z[self.block(name)]
            mats.append(a)
        mats[1] *= self.p_max_mw
        return LiftedPoint(*mats)


def build_op4(scn: Scenario, cfg: InstanceConfig, point: LiftedPoint,
              fixed=None, tol: float = 1e-9, rate_form: str = "exact") -> ConvexProgram:
    """Assemble the convex subproblem linearized at ``point``.

    Constraint families, in order: affine (association boxes, row bounds,
    column bounds, power box, QoS shares, tangent-plane rate shares,
    ``v >= 0``, a slack lower bound on ``u``), convexified power budget per mBS, log-rate per pair
    (labelled ``C9`` in the exact form and ``C12`` in the dropped form).
    Pairs outside coverage, or deactivated by ``fixed``, carry no
    variables; pairs forced to 1 and rows with ``L = 1`` become equalities.

    Raises
    ------
    PreconditionError
        When ``point`` violates the association or power boxes, row or
        column bounds, or puts association on an inactive pair.
    """
    if rate_form not in RATE_FORMS:
        raise ValueError(f"rate_form must be one of {RATE_FORMS}")
    pat = association_pattern(scn, cfg, fixed)
    _check_point(scn, cfg, pat, point, tol)

    rows, cols = np.nonzero(pat.active)
    K = len(rows)
    dim = 4 * K
    lay = Op4Layout(scn.n, scn.m, rows, cols, pat, scn.params.p_max_mw)
    X, P, U, V = (np.arange(K) + b * K for b in range(4))
    free = pat.free[rows, cols]
    one = pat.fixed_one[rows, cols]
    w = cfg.weights
    chat = normalized_coeff(scn)[rows, cols]
    pmin = scn.params.p_min_mw / scn.params.p_max_mw

    A_rows, b_vals, labels = [], [], []

    def add(idx, coef, const, label):
        A_rows.append((np.atleast_1d(idx), np.atleast_1d(coef)))
        b_vals.append(const)
        labels.append(label)

    for k in np.nonzero(free)[0]:
        add(X[k], -1.0, 0.0, ("C1lo", (rows[k], cols[k])))
    for k in np.nonzero(free)[0]:
        add(X[k], 1.0, -1.0, ("C1hi", (rows[k], cols[k])))
    for i in range(scn.n):
        ks = np.nonzero((rows == i) & free)[0]
        if pat.row_eq[i] or ks.size == 0:
            continue
        if pat.row_lo[i] > 0:
            add(X[ks], -np.ones(ks.size), pat.row_lo[i], ("C2", (i,)))
        if np.isfinite(pat.row_hi[i]):
            add(X[ks], np.ones(ks.size), -pat.row_hi[i], ("L", (i,)))
    for j in range(scn.m):
        if pat.col_lo[j]:
            ks = np.nonzero(cols == j)[0]
            add(X[ks], -np.ones(ks.size), 1.0, ("C3", (j,)))
    for k in range(K):
        add(P[k], -1.0, pmin, ("C4lo", (rows[k], cols[k])))
    for k in range(K):
        add(P[k], 1.0, -1.0, ("C4hi", (rows[k], cols[k])))
    if cfg.enforce_qos:
        rmin = normalized_rmin(scn)
        for i in range(scn.n):
            ks = np.nonzero(rows == i)[0]
            add(U[ks], -np.ones(ks.size), w[i] * rmin, ("C7", (i,)))

    # tangent plane of v^2/s with s the column sum of x
    s_dot = point.x.sum(axis=0)
    if np.any(s_dot[np.unique(cols)] < EPS_S):
        raise DomainError("column sum below linearization threshold")
    v_dot = point.v[rows, cols]
    for k in range(K):
        j = cols[k]
        col_ks = np.nonzero(cols == j)[0]
        sd = s_dot[j]
        idx = np.concatenate([[U[k], V[k]], X[col_ks]])
        coef = np.concatenate([[1.0, -2.0 * v_dot[k] / sd],
                               np.full(col_ks.size, v_dot[k] ** 2 / sd ** 2)])
        add(idx, coef, 0.0, ("C11", (rows[k], cols[k])))
    for k in range(K):
        add(V[k], -1.0, 0.0, ("Vnn", (rows[k], cols[k])))
    # the tangent plane never drops below -v_dot^2 n_j / s_dot^2, so this
    # bound is inactive at every optimum; without it phase I is unbounded
    n_col = np.bincount(cols, minlength=scn.m)
    for k in range(K):
        j = cols[k]
        add(U[k], -1.0, -(v_dot[k] ** 2 * n_col[j] / s_dot[j] ** 2 + 1.0),
            ("Ulo", (rows[k], cols[k])))

    data, ri, ci = [], [], []
    for r, (idx, coef) in enumerate(A_rows):
        ri.extend([r] * len(idx))
        ci.extend(idx.tolist())
        data.extend(coef.tolist())
    A = sp.csr_matrix((data, (ri, ci)), shape=(len(A_rows), dim))
    fams = [AffineConstraints(A, b_vals, labels)]

    x_dot = point.x[rows, cols]
    p_dot = point.p[rows, cols] / scn.params.p_max_mw
    fams.append(ColumnPowerConstraints(
        dim, cols, X, P, x_dot - p_dot, scn.m, [("C10", (j,)) for j in range(scn.m)]))
    if rate_form == "exact":
        fams.append(AssociatedRateConstraints(
            dim, X, P, V, w[rows], chat, [("C9", (rows[k], cols[k])) for k in range(K)]))
    else:
        fams.append(LogRateConstraints(
            dim, P, V, w[rows], chat, [("C12", (rows[k], cols[k])) for k in range(K)]))

    eq_rows, eq_b = [], []
    for k in np.nonzero(one)[0]:
        e = np.zeros(dim)
        e[X[k]] = 1.0
        eq_rows.append(e)
        eq_b.append(1.0)
    for i in np.nonzero(pat.row_eq)[0]:
        e = np.zeros(dim)
        e[X[np.nonzero((rows == i) & free)[0]]] = 1.0
        eq_rows.append(e)
        eq_b.append(1.0)
    eq_A = np.array(eq_rows) if eq_rows else None
    eq_bv = np.array(eq_b) if eq_rows else None

    obj = np.zeros(dim)
    obj[U] = 1.0
    keep = None
    if rate_form == "exact":
        # x > 0 is the domain of the exact rate constraint
        keep = np.array([lab[0] == "C1lo" for f in fams for lab in f.labels])
    return ConvexProgram(dim, obj, fams, eq_A, eq_bv, lay, keep)


def _check_point(scn, cfg, pat, point, tol):
    from .model import Violation

    x, p = point.x, point.p
    bad = []

    def add(cid, mask, resid):
        for idx in zip(*np.nonzero(mask)):
            bad.append(Violation(cid, tuple(int(t) for t in idx), float(resid[idx])))

    add("C1", (x < -tol) | (x > 1 + tol), np.maximum(-x, x - 1))
    add("inactive", (x > tol) & ~pat.active, x)
    rows = x.sum(axis=1)
    add("C2", rows < 1 - tol, 1 - rows)
    L = cfg.limit(scn.m)
    add("L", rows > L + tol, rows - L)
    cols = x.sum(axis=0)
    add("C3", cols < 1 - tol, 1 - cols)
    prm = scn.params
    act = pat.active
    ptol = tol * prm.p_max_mw
    add("C4", act & ((p < prm.p_min_mw - ptol) | (p > prm.p_max_mw + ptol)),
        np.maximum(prm.p_min_mw - p, p - prm.p_max_mw))
    if bad:
        raise PreconditionError(
            "linearization point violates " + ", ".join(sorted({b.constraint for b in bad})), bad)
