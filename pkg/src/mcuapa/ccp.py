"""Convex-concave procedure for the relaxed association/power problem.

Each outer iteration linearizes the concave parts at the current iterate,
solves the resulting convex program with the barrier method and adopts
the optimum as the next linearization point. The loop stops when the
objective ``sum(u)`` changes by at most ``tau``.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .barrier import BarrierSettings, phase1, solve
from .dcp import RATE_FORMS, AffineConstraints, ConvexProgram, build_op4
from .errors import InfeasibleInstanceError, SolverFailure
from .model import (InstanceConfig, LiftedPoint, Solution, association_pattern,
                    lift_to_op3, nearest_association, normalized_rmin,
                    repair_columns, weighted_objective)
from .scenario import Scenario, user_rates

__all__ = ["CcpSettings", "CcpIteration", "CcpTrace", "init_feasible", "start_association",
           "run_ccp"]

log = logging.getLogger(__name__)

X_FLOOR = 1e-3
WARM_DIV = 10.0
WARM_CAP = 1


@dataclass(frozen=True)
class CcpSettings:
    tau: float = 1e-4
    max_outer: int = 100
    warm_start: bool = True
    rate_form: str = "exact"
    # inner solves may stop once their gap bound is below this fraction of
    # the ascent already made; 0 solves every subproblem to eps_gap
    inexact: float = 0.01
    # weight of the association-polytope center in the starting point
    init_spread: float = 0.5
    inner: BarrierSettings = field(default_factory=BarrierSettings)

    def __post_init__(self):
        if not 0 <= self.inexact < 1:
            raise ValueError("inexact must lie in [0, 1)")
        if not 0 <= self.init_spread < 1:
            raise ValueError("init_spread must lie in [0, 1)")
        if self.rate_form not in RATE_FORMS:
            raise ValueError(f"rate_form must be one of {RATE_FORMS}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")


@dataclass(frozen=True)
class CcpIteration:
    k: int
    sum_u_norm: float
    weighted_rate_bps: float
    newton_iters: int
    gap_bound: float
    barrier_status: str


@dataclass
class CcpTrace:
    iterations: list = field(default_factory=list)
    stop_reason: str = ""

    @property
    def objectives(self) -> np.ndarray:
        return np.array([it.sum_u_norm for it in self.iterations])

    @property
    def outer_iterations(self) -> int:
        return len(self.iterations) - 1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "sum_u_norm", "weighted_rate_bps", "newton_iters", "stop_reason"])
            last = len(self.iterations) - 1
            for n, it in enumerate(self.iterations):
                w.writerow([it.k, repr(it.sum_u_norm), repr(it.weighted_rate_bps),
                            it.newton_iters, self.stop_reason if n == last else ""])


def init_feasible(scn: Scenario, cfg: InstanceConfig, fixed=None,
                  spread: float = 0.0) -> LiftedPoint:
    """Nearest-mBS starting point.

    Every user takes its ``min(L, admissible)`` nearest admissible mBSs
    (pairs fixed to 1 first); userless mBSs receive their nearest user.
    Associated pairs get ``0.9 * P_max / load`` and the other admissible
    pairs the same column value; when that split misses a user's QoS the
    powers are shifted toward it. Auxiliaries are lifted with both rate
    constraints tight, then ``v`` shrunk by 1% and ``u`` by 3% for slack.

    Parameters
    ----------
    spread : float
        Weight in ``[0, 1)`` of the analytic center of the association
        polytope blended into the binary association. A positive value
        gives every admissible pair some association, which the exact rate
        constraint needs for the pair to ever be picked up by the
        procedure. Ignored when the polytope has no interior.
    """
    if not 0 <= spread < 1:
        raise ValueError("spread must lie in [0, 1)")
    pat = association_pattern(scn, cfg, fixed)
    x = start_association(scn, cfg, fixed, pat)

    prm = scn.params
    load = x.sum(axis=0)
    col_p = np.clip(0.9 * prm.p_max_mw / np.maximum(load, 1.0), prm.p_min_mw, prm.p_max_mw)
    p = np.where(pat.active, col_p[None, :], 0.0)
    if cfg.enforce_qos:
        p = _qos_powers(scn, x, p)
    if spread > 0:
        xc = _association_center(scn, cfg, pat)
        if xc is not None:
            x = (1.0 - spread) * x + spread * xc
            # keep the blended budget strictly inside P_max
            used = (x * p).sum(axis=0)
            scale = np.minimum(1.0, 0.999 * prm.p_max_mw / np.maximum(used, 1e-300))
            p = np.maximum(p * scale[None, :], np.where(pat.active, prm.p_min_mw, 0.0))
    lifted = lift_to_op3(scn, cfg, Solution(x, p))
    # shrink both auxiliaries so the rate constraints start with slack
    pt = LiftedPoint(lifted.x, lifted.p, 0.97 * lifted.u, 0.99 * lifted.v)
    if cfg.enforce_qos:
        short = cfg.weights * normalized_rmin(scn) - pt.u.sum(axis=1)
        if np.any(short > 0):
            warnings.warn(f"initial point misses the QoS share for users "
                          f"{np.nonzero(short > 0)[0].tolist()}; phase I will try to repair",
                          RuntimeWarning, stacklevel=2)
    return pt


def start_association(scn: Scenario, cfg: InstanceConfig, fixed=None, pat=None) -> np.ndarray:
    """Binary nearest-mBS association used by :func:`init_feasible`."""
    pat = pat if pat is not None else association_pattern(scn, cfg, fixed)
    L = cfg.limit(scn.m)
    x = pat.fixed_one.astype(float)
    remaining = pat.active & ~pat.fixed_one
    for i in range(scn.n):
        k = L - int(x[i].sum())
        if k > 0 and remaining[i].any():
            sub = nearest_association(scn, k, remaining)[i]
            x[i] = np.maximum(x[i], sub)
    return repair_columns(x, -scn.distance, L, pat.active, locked=pat.fixed_one)


def _association_center(scn: Scenario, cfg: InstanceConfig, pat):
    """Analytic center of the relaxed association polytope, or ``None``.

    Only the association constraints are used (boxes, row bounds, column
    bounds, forced ones). ``None`` when the polytope has no strict
    interior, e.g. a perfect matching.
    """
    rows, cols = np.nonzero(pat.free)
    K = len(rows)
    if K == 0:
        return None
    one = pat.fixed_one
    A, b = [], []

    def add(idx, coef, const):
        r = np.zeros(K)
        r[idx] = coef
        A.append(r)
        b.append(const)

    for k in range(K):
        add(k, -1.0, 0.0)
        add(k, 1.0, -1.0)
    eq = []
    for i in range(scn.n):
        ks = np.nonzero(rows == i)[0]
        if ks.size == 0:
            continue
        if pat.row_eq[i]:
            r = np.zeros(K)
            r[ks] = 1.0
            eq.append(r)
            continue
        if pat.row_lo[i] > 0:
            add(ks, -1.0, pat.row_lo[i])
        if np.isfinite(pat.row_hi[i]):
            add(ks, 1.0, -pat.row_hi[i])
    for j in range(scn.m):
        if pat.col_lo[j]:
            add(np.nonzero(cols == j)[0], -1.0, 1.0)
    prog = ConvexProgram(K, np.zeros(K), [AffineConstraints(np.array(A), b, [("box", ())] * len(b))],
                         np.array(eq) if eq else None, np.ones(len(eq)) if eq else None)
    hint = np.full(K, 0.5)
    try:
        ph = phase1(prog, hint)
        if ph.status != "feasible":
            return None
        res = solve(prog, ph.z, BarrierSettings(eps_gap=1.0))
    except SolverFailure:
        return None
    xc = one.astype(float)
    xc[rows, cols] = res.z_star
    return xc


def _qos_powers(scn: Scenario, x, p):
    """Shift power toward users the equal split leaves short of R_min.

    Each associated link is asked to carry ``R_min / (associations of the
    user)``; in a column whose minimum powers fit in ``0.999 P_max`` every
    user gets its minimum plus an equal share of the rest. Columns that
    cannot be fixed this way keep the equal split.
    """
    prm = scn.params
    if np.all(user_rates(scn, x, np.where(x > 0, p, 0.0)) >= prm.r_min_bps):
        return p
    load = x.sum(axis=0)
    deg = np.maximum(x.sum(axis=1), 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        se = load[None, :] * prm.r_min_bps / (prm.bandwidth_hz * deg[:, None])
        need = (np.exp2(se) - 1.0) / scn.snr_coeff
    need = np.where(x > 0, np.maximum(need, prm.p_min_mw), 0.0)
    p = p.copy()
    budget = 0.999 * prm.p_max_mw
    for j in range(scn.m):
        tot = need[:, j].sum()
        if load[j] == 0 or not np.isfinite(tot) or tot > budget:
            continue
        on = x[:, j] > 0
        p[on, j] = need[on, j] + (budget - tot) / load[j]
    return p


def run_ccp(scn: Scenario, cfg: InstanceConfig, settings: CcpSettings | None = None,
            fixed=None, start: LiftedPoint | None = None, trace_path=None):
    """Iterate convex subproblems until ``|R_k - R_{k-1}| <= tau``.

    Returns
    -------
    point : LiftedPoint
        Final iterate (the start point if the instance is infeasible).
    trace : CcpTrace
        Per-iteration objectives and barrier statistics. ``stop_reason`` is
        ``"converged"``, ``"max_outer"`` or ``"infeasible"``.

    Raises
    ------
    SolverFailure
        On numerical breakdown; the message carries the iteration index.
    """
    s = settings or CcpSettings()
    trace = CcpTrace()
    try:
        point = start if start is not None else init_feasible(scn, cfg, fixed, s.init_spread)
    except InfeasibleInstanceError as exc:
        log.info("instance structurally infeasible: %s", exc)
        trace.stop_reason = "infeasible"
        return None, trace

    r_prev = r_before = float(point.u.sum())
    prev = None
    trace.iterations.append(CcpIteration(
        0, r_prev, weighted_objective(scn, cfg, point.solution()), 0, np.nan, "init"))
    for k in range(1, s.max_outer + 1):
        try:
            prog = build_op4(scn, cfg, point, fixed, rate_form=s.rate_form)
            hint = prog.layout.pack(point)
            if s.rate_form == "exact":
                # the exact rate constraint needs x > 0 on every modelled pair
                xs = prog.layout.block("x")
                hint[xs] = np.where(hint[xs] > 0, hint[xs], X_FLOOR)
            ph = phase1(prog, hint, s.inner)
            if ph.status != "feasible" and k == 1 and cfg.enforce_qos and start is None:
                # the start's linearization may simply be too conservative
                alt = _qos_start(scn, cfg, fixed, s, point)
                if alt is not None:
                    point = alt
                    r_prev = r_before = float(point.u.sum())
                    trace.iterations[0] = CcpIteration(
                        0, r_prev, weighted_objective(scn, cfg, point.solution()), 0, np.nan,
                        "qos_start")
                    prog = build_op4(scn, cfg, point, fixed, rate_form=s.rate_form)
                    ph = phase1(prog, prog.layout.pack(point), s.inner)
            if ph.status != "feasible":
                if k == 1:
                    trace.stop_reason = "infeasible"
                    break
                raise SolverFailure("previous optimum infeasible for the next subproblem")
            stop = None
            if s.inexact > 0 and k > 1:
                obj, floor = prog.objective, r_prev

                def stop(z, gap):
                    return gap <= s.inexact * (obj @ z - floor)
            res = None
            if s.warm_start and prev is not None and ph.newton_iters == 0:
                step = abs(trace.iterations[-1].sum_u_norm - r_before)
                res = _warm_solve(prog, ph.z, prev, step, s.inner, stop)
            if res is None:
                res = solve(prog, ph.z, s.inner, stop=stop)
            if res.status == "max_iters":
                # late subproblems can be badly conditioned; one retry with more Newton steps
                res = solve(prog, ph.z, replace(s.inner, max_newton=4 * s.inner.max_newton),
                            stop=stop)
            if res.status == "max_iters" and res.objective < r_prev - 10 * s.inner.eps_gap:
                raise SolverFailure(f"barrier stopped with status {res.status} "
                                    "below the previous objective")
            prev = res
        except SolverFailure as exc:
            raise SolverFailure(f"outer iteration {k}: {exc}") from exc
        point = _clean(prog.layout.unpack(res.z_star), scn)
        r_k = res.objective
        trace.iterations.append(CcpIteration(
            k, r_k, weighted_objective(scn, cfg, point.solution()),
            res.newton_iters_total + ph.newton_iters, res.gap_bound, res.status))
        log.debug("ccp k=%d sum_u=%.8g", k, r_k)
        if abs(r_k - r_prev) <= s.tau:
            trace.stop_reason = "converged"
            break
        r_before, r_prev = r_prev, r_k
    else:
        trace.stop_reason = "max_outer"
    if trace_path is not None:
        trace.to_csv(trace_path)
    return point, trace


class _Padded:
    """A constraint family that ignores one trailing variable."""

    def __init__(self, fam):
        self.fam = fam
        self.kind = fam.kind
        self.labels = fam.labels
        self.dim = fam.dim + 1
        self.jac_rows, self.jac_cols = fam.jac_rows, fam.jac_cols

    def __len__(self):
        return len(self.fam)

    def eval(self, z):
        return self.fam.eval(z[:-1])

    def jac_values(self, z):
        return self.fam.jac_values(z[:-1])

    def hess_entries(self, z, weights):
        return self.fam.hess_entries(z[:-1], weights)

    def describe(self, k):
        return self.fam.describe(k)


def _floor_program(prog: ConvexProgram, weights, cap: float) -> ConvexProgram:
    """Maximize ``t <= cap`` with ``sum_j u_ij >= w_i t`` on top of ``prog``."""
    lay = prog.layout
    d = prog.dim
    U = np.arange(d)[lay.block("u")]
    A = np.zeros((lay.n + 1, d + 1))
    A[lay.rows, U] = -1.0
    A[np.arange(lay.n), d] = weights
    A[lay.n, d] = 1.0
    b = np.zeros(lay.n + 1)
    b[-1] = -cap
    fams = [_Padded(f) for f in prog.constraints]
    fams.append(AffineConstraints(A, b, [("floor", (i,)) for i in range(lay.n)] + [("cap", ())]))
    obj = np.zeros(d + 1)
    obj[d] = 1.0
    eq_A = None if prog.eq_A is None else np.hstack([prog.eq_A, np.zeros((prog.n_eq, 1))])
    unshifted = None
    if prog.unshifted is not None:
        unshifted = np.concatenate([prog.unshifted, np.zeros(lay.n + 1, bool)])
    return ConvexProgram(d + 1, obj, fams, eq_A, prog.eq_b, lay, unshifted)


def _qos_start(scn, cfg, fixed, s: CcpSettings, point: LiftedPoint):
    """Raise the smallest QoS share by a max-min CCP, or return ``None``.

    The subproblems drop the QoS rows and maximize the common floor ``t``
    of ``sum_j u_ij / w_i``, capped slightly above ``R_min``. The loop ends
    as soon as the floor clears ``R_min`` or when it stalls below it.
    """
    free_cfg = replace(cfg, enforce_qos=False)
    rmin = normalized_rmin(scn)
    cap = 1.02 * rmin
    done = 1.01 * rmin
    t_prev = -np.inf
    for _ in range(s.max_outer):
        try:
            base = build_op4(scn, free_cfg, point, fixed, rate_form=s.rate_form)
            prog = _floor_program(base, cfg.weights, cap)
            z0 = base.layout.pack(point)
            if s.rate_form == "exact":
                xs = base.layout.block("x")
                z0[xs] = np.where(z0[xs] > 0, z0[xs], X_FLOOR)
            t0 = min(float(np.min(point.u.sum(axis=1) / cfg.weights)), cap) - 1e-3 * rmin
            ph = phase1(prog, np.append(z0, t0), s.inner)
            if ph.status != "feasible":
                return None
            res = solve(prog, ph.z, s.inner, stop=lambda z, gap: z[-1] >= done)
        except SolverFailure as exc:
            log.info("QoS start failed: %s", exc)
            return None
        point = _clean(base.layout.unpack(res.z_star[:-1]), scn)
        t = float(res.z_star[-1])
        log.debug("qos start floor %.6g of %.6g", t, rmin)
        if t >= done:
            return point
        if t - t_prev <= 1e-3 * rmin:
            return None
        t_prev = t
    return None


def _warm_solve(prog, z_prev, prev, step, inner: BarrierSettings, stop=None):
    """Re-solve starting near the previous central path.

    The previous optimum sits at the boundary, where centering for a
    smaller ``t`` is slow. Instead take the stored center of the previous
    solve whose ``m/t`` is closest to (at most) a tenth of the last
    objective change, pull it toward ``z_prev`` until it is strictly
    feasible for the new program and resume from its ``t``. Returns
    ``None`` when this does not produce an optimal solve.
    """
    t_target = prog.n_ineq / max(WARM_DIV * step, 1e-300)
    t_target = min(t_target, prog.n_ineq / inner.eps_gap / inner.mu ** WARM_CAP)
    cands = [c for c in prev.centers if c[0] <= t_target]
    if not cands or cands[-1][1].shape != z_prev.shape:
        return None
    t_c, z_c = cands[-1]
    for theta in (0.0, 0.5, 0.75, 0.9, 0.99):
        z = z_c + theta * (z_prev - z_c)
        g = prog.eval(z)
        if np.all(np.isfinite(g)) and np.all(g < 0):
            break
    else:
        return None
    res = solve(prog, z, replace(inner, t0=max(t_c, inner.t0)), stop=stop)
    return None if res.status == "max_iters" else res


def _clean(pt: LiftedPoint, scn: Scenario) -> LiftedPoint:
    # interior iterates sit within rounding of the boxes; clip the residue
    x = np.clip(pt.x, 0.0, 1.0)
    p = np.clip(pt.p, 0.0, scn.params.p_max_mw)
    return LiftedPoint(x, p, pt.u, np.maximum(pt.v, 0.0))
