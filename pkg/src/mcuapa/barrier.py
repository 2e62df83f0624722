"""Log-barrier interior-point solver for :class:`~mcuapa.dcp.ConvexProgram`.

Phase I finds a strictly feasible point by minimizing the largest
constraint value; phase II runs the classical barrier method with damped
Newton centering and backtracking line search. Linear equalities are
handled by working in a null-space basis, so every iterate satisfies them
to rounding.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la

from .errors import PreconditionError, SolverFailure

_EPS = np.finfo(float).eps

__all__ = [
    "BarrierSettings",
    "SolveResult",
    "Phase1Result",
    "newton_direction",
    "phase1",
    "solve",
]


@dataclass(frozen=True)
class BarrierSettings:
    t0: float = 1.0
    mu: float = 20.0
    eps_gap: float = 1e-7
    newton_tol: float = 1e-10
    max_newton: int = 50
    ls_alpha: float = 0.1
    ls_beta: float = 0.5

    def __post_init__(self):
        if not self.mu > 1:
            raise ValueError("mu must exceed 1")
        for name in ("t0", "eps_gap", "newton_tol", "ls_alpha", "ls_beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (self.ls_alpha < 0.5 and self.ls_beta < 1):
            raise ValueError("need ls_alpha < 0.5 and ls_beta < 1")
        if self.max_newton < 1:
            raise ValueError("max_newton must be >= 1")


@dataclass
class SolveResult:
    z_star: np.ndarray
    objective: float
    gap_bound: float
    newton_iters_total: int
    status: str
    trace: list = field(default_factory=list, repr=False)
    # (t, z) after every completed centering step; handy for warm starts
    centers: list = field(default_factory=list, repr=False)


@dataclass
class Phase1Result:
    z: np.ndarray
    max_violation: float
    status: str  # "feasible" | "infeasible"
    newton_iters: int = 0


def newton_direction(hess, grad, delta0=1e-10, delta_max=1e-2):
    """Solve ``hess @ step = -grad`` by Cholesky.

    The system is first scaled symmetrically to unit diagonal (barrier
    Hessians mix entries of wildly different magnitude). If the
    factorization fails, ``delta * I`` is added to the scaled matrix with
    ``delta`` growing tenfold from ``delta0`` up to ``delta_max``.

    Returns
    -------
    step : ndarray
    decrement_sq : float
        ``grad @ inv(hess) @ grad``, the squared Newton decrement.
    """
    H = np.asarray(hess, dtype=float)
    g = np.asarray(grad, dtype=float)
    diag = np.diag(H)
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        d = np.ones_like(g)
    else:
        d = 1.0 / np.sqrt(diag)
    Hs = H * np.outer(d, d)
    gs = g * d
    delta = 0.0
    while True:
        try:
            A = Hs
            if delta:
                A = Hs.copy()
                A.flat[::A.shape[0] + 1] += delta
            cf = la.cho_factor(A, check_finite=False)
            step = -la.cho_solve(cf, gs, check_finite=False) * d
            if np.all(np.isfinite(step)):
                return step, float(-g @ step)
        except (la.LinAlgError, ValueError):
            pass
        delta = delta0 if delta == 0.0 else delta * 10.0
        if delta > delta_max * (1 + 1e-12):
            raise SolverFailure("Hessian not positive definite after regularization")


class _Barrier:
    """``phi(z) = -sum log(-g_k(z))`` with gradient and Hessian.

    The Gauss-Newton part ``sum grad_k grad_k^T / g_k^2`` is accumulated
    with one ``bincount`` over precomputed index pairs of each Jacobian row.
    """

    def __init__(self, constraints, dim):
        self.fams = list(constraints)
        self.dim = dim
        self.m = sum(len(c) for c in constraints)
        self._pairs = [self._row_pairs(f) for f in self.fams]
        self._keys = None

    def _row_pairs(self, fam):
        rows, cols = fam.jac_rows, fam.jac_cols
        order = np.argsort(rows, kind="stable")
        starts = np.searchsorted(rows[order], np.arange(len(fam) + 1))
        # every ordered pair of entries sharing a row, row by row
        rep = np.diff(starts)[rows[order]]
        e1 = np.repeat(order, rep)
        within = np.arange(rep.sum()) - np.repeat(np.cumsum(rep) - rep, rep)
        e2 = order[np.repeat(starts[rows[order]], rep) + within]
        return e1, e2, rows[e1], cols[e1] * self.dim + cols[e2]

    def values(self, z):
        return np.concatenate([f.eval(z) for f in self.fams])

    def value(self, z):
        g = self.values(z)
        if not np.all(np.isfinite(g)) or np.any(g >= 0):
            return np.inf
        return -np.sum(np.log(-g))

    def derivatives(self, z):
        d = self.dim
        grad = np.zeros(d)
        keys, vals = [], []
        for f, (e1, e2, r12, key) in zip(self.fams, self._pairs):
            inv = 1.0 / -f.eval(z)
            jv = f.jac_values(z)
            grad += np.bincount(f.jac_cols, jv * inv[f.jac_rows], minlength=d)
            keys.append(key)
            vals.append(jv[e1] * jv[e2] * inv[r12] ** 2)
            ent = f.hess_entries(z, inv)
            if ent is not None:
                keys.append(ent[0] * d + ent[1])
                vals.append(ent[2])
        # sparsity patterns are static, so the key vector is built once
        if self._keys is None or self._keys[0] != len(keys):
            self._keys = (len(keys), np.concatenate(keys))
        H = np.bincount(self._keys[1], np.concatenate(vals), minlength=d * d)
        return grad, H.reshape(d, d)


def _nullspace(eq_A, dim):
    if eq_A is None or eq_A.shape[0] == 0:
        return None
    return la.null_space(eq_A)


def _center(obj, bar, z, t, N, s: BarrierSettings, trace=None):
    """Newton-minimize ``t * (-obj @ z) + phi(z)`` from strictly feasible ``z``.

    Returns ``(z, iterations, converged)``.
    """
    def F(zz):
        return -t * (obj @ zz) + bar.value(zz)

    fz = F(z)
    for it in range(1, s.max_newton + 1):
        grad, H = bar.derivatives(z)
        grad = grad - t * obj
        if N is not None:
            dy, lam2 = newton_direction(N.T @ H @ N, N.T @ grad)
            dz = N @ dy
        else:
            dz, lam2 = newton_direction(H, grad)
        # below ~ulp(F) the decrement is rounding noise
        if lam2 / 2.0 <= max(s.newton_tol, 64 * _EPS * abs(fz)):
            return z, it - 1, True
        slope = grad @ dz
        alpha = 1.0
        f_new = F(z + dz)
        while not np.isfinite(f_new) or f_new > fz + s.ls_alpha * alpha * slope:
            alpha *= s.ls_beta
            if alpha < 1e-14:
                # no representable decrease left; only converged if the
                # decrement is already near the rounding level of F
                return z, it, lam2 / 2.0 <= math.sqrt(_EPS) * max(1.0, abs(fz))
            f_new = F(z + alpha * dz)
        z = z + alpha * dz
        fz = f_new
        if trace is not None:
            trace.append((t, float(obj @ z), lam2, alpha))
    return z, s.max_newton, False


def _barrier_loop(obj, bar, z, N, s: BarrierSettings, trace=None, stop=None, centers=None):
    t = s.t0
    total = 0
    status = "optimal"
    while True:
        z, its, ok = _center(obj, bar, z, t, N, s, trace)
        total += its
        if not ok:
            status = "max_iters"
            break
        if centers is not None:
            centers.append((t, z.copy()))
        if bar.m / t <= s.eps_gap:
            break
        if stop is not None and stop(z, bar.m / t):
            status = "early"
            break
        t *= s.mu
    return z, t, total, status


class _Shifted:
    """Wraps a constraint family as ``g(z) - s <= 0`` on ``(z, s)``."""

    def __init__(self, fam, dim, mask=None):
        self.fam = fam
        self.kind = fam.kind
        self.dim = dim + 1
        k = len(fam)
        self.jac_rows = np.concatenate([fam.jac_rows, np.arange(k)])
        self.jac_cols = np.concatenate([fam.jac_cols, np.full(k, dim)])
        # rows with mask 0 are not shifted
        self._shift = np.ones(k) if mask is None else np.asarray(mask, dtype=float)
        self._minus = -self._shift

    def __len__(self):
        return len(self.fam)

    def eval(self, zs):
        return self.fam.eval(zs[:-1]) - zs[-1] * self._shift

    def jac_values(self, zs):
        return np.concatenate([self.fam.jac_values(zs[:-1]), self._minus])

    def hess_entries(self, zs, weights):
        return self.fam.hess_entries(zs[:-1], weights)


def phase1(prog, hint, settings: BarrierSettings | None = None,
           margin: float = 1e-6) -> Phase1Result:
    """Find ``z`` with every ``g_k(z) < 0`` (and equalities met).

    Minimizes ``s`` subject to ``g_k(z) <= s`` and ``s >= -1`` with the
    barrier method, starting from ``hint`` projected onto the equality set.
    Stops once a completed centering step reaches ``s < -margin``; declares
    the program infeasible when the duality bound shows ``s* >= -margin``.
    A hint that is already strictly feasible is returned unchanged.
    """
    s = settings or BarrierSettings()
    z = np.array(hint, dtype=float)
    dim = prog.dim
    if prog.eq_A is not None:
        resid = prog.eq_A @ z - prog.eq_b
        if np.max(np.abs(resid)) > 1e-12:
            z = z - la.lstsq(prog.eq_A, resid)[0]
            if np.max(np.abs(prog.eq_A @ z - prog.eq_b)) > 1e-9:
                return Phase1Result(z, np.inf, "infeasible")
        elif np.all(prog.eval(z) < 0):
            return Phase1Result(z, float(np.max(prog.eval(z))), "feasible")
    else:
        g = prog.eval(z)
        if g.size == 0 or np.all(g < 0):
            return Phase1Result(z, float(np.max(g, initial=-np.inf)), "feasible")

    g = prog.eval(z)
    if not np.all(np.isfinite(g)):
        raise SolverFailure("phase-I start lies outside the constraint domain")
    if np.all(g < -margin):
        return Phase1Result(z, float(g.max()), "feasible")

    shift = np.ones(g.size)
    if prog.unshifted is not None:
        shift[prog.unshifted & (g < 0)] = 0.0
    bounds = np.cumsum([0] + [len(f) for f in prog.constraints])
    lower = _LowerS(dim + 1)
    fams = [_Shifted(f, dim, shift[a:b])
            for f, a, b in zip(prog.constraints, bounds[:-1], bounds[1:])] + [lower]
    bar = _Barrier(fams, dim + 1)
    obj = np.zeros(dim + 1)
    obj[-1] = -1.0
    zs = np.append(z, max(g.max(), -0.5) + 1.0)
    N = None
    if prog.eq_A is not None:
        N = _nullspace(np.hstack([prog.eq_A, np.zeros((prog.n_eq, 1))]), dim + 1)

    # start where the hint is centred in s: d/ds [t s - sum log(s - g)] = 0
    t = max(s.t0, float(np.sum(shift / (zs[-1] - g))))
    total = 0
    while True:
        zs, its, ok = _center(obj, bar, zs, t, N, s)
        total += its
        smax = float(np.max(prog.eval(zs[:-1])))
        if smax < -margin:
            return Phase1Result(zs[:-1], smax, "feasible", total)
        if zs[-1] - bar.m / t > -margin or not ok or t > 1e12:
            return Phase1Result(zs[:-1], smax, "infeasible", total)
        t *= s.mu


class _LowerS:
    """``-s - 1 <= 0``: keeps the phase-I objective bounded."""

    kind = "affine"

    def __init__(self, dim):
        self.dim = dim
        self.jac_rows = np.array([0])
        self.jac_cols = np.array([dim - 1])

    def __len__(self):
        return 1

    def eval(self, zs):
        return np.array([-zs[-1] - 1.0])

    def jac_values(self, zs):
        return np.array([-1.0])

    def hess_entries(self, zs, weights):
        return None


def solve(prog, z0, settings: BarrierSettings | None = None,
          trace_path=None, stop=None) -> SolveResult:
    """Maximize ``prog.objective @ z`` from a strictly feasible ``z0``.

    Runs centering steps for ``t = t0, mu*t0, ...`` until the duality gap
    bound ``m / t`` drops to ``eps_gap``. If a centering step exhausts
    ``max_newton`` the best iterate is returned with status ``max_iters``.
    ``stop(z, gap_bound)``, if given, is called after every centering
    step; returning true ends the solve early with status ``early``.
    When ``trace_path`` is given, one CSV row per Newton step is written
    with columns ``t, objective, decrement_sq, step``.
    """
    s = settings or BarrierSettings()
    z = np.array(z0, dtype=float)
    g = prog.eval(z)
    if not (np.all(np.isfinite(g)) and np.all(g < 0)):
        raise PreconditionError("starting point is not strictly feasible")
    if prog.eq_A is not None and np.max(np.abs(prog.eq_A @ z - prog.eq_b)) > 1e-9:
        raise PreconditionError("starting point violates the equality constraints")
    bar = _Barrier(prog.constraints, prog.dim)
    N = _nullspace(prog.eq_A, prog.dim)
    trace = [] if trace_path is not None else None
    if bar.m == 0:
        raise PreconditionError("program without inequality constraints is unbounded or trivial")
    centers = []
    z, t, total, status = _barrier_loop(prog.objective, bar, z, N, s, trace, stop, centers)
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "objective", "decrement_sq", "step"])
            w.writerows(trace)
    return SolveResult(z, float(prog.objective @ z), bar.m / t, total, status, trace or [],
                       centers)


def with_settings(s: BarrierSettings, **kw) -> BarrierSettings:
    return replace(s, **kw)
