"""Integer recovery: from a relaxed association to a binary one.

Two routes are provided. :func:`round_and_repair` thresholds the relaxed
association and patches the constraint violations in O(nm);
:func:`branch_and_bound` searches the binary associations best-first, with
either a certified per-mBS bound or the CCP relaxation value of each node
as a (heuristic) bound.
:func:`reoptimize_power` restores optimal powers for a fixed association
and :func:`repair_qos` moves single links until the rate floors can be met.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .barrier import BarrierSettings, phase1, solve
from .ccp import CcpSettings, run_ccp
from .dcp import LN2, AffineConstraints, ConvexProgram, LogRateConstraints
from .errors import InfeasibleInstanceError, SolverFailure
from .model import (InstanceConfig, Solution, association_pattern, repair_columns,
                    weighted_objective)
from .scenario import Scenario, user_rates

__all__ = ["RecoverySettings", "BnbResult", "BOUNDS", "round_and_repair",
           "reoptimize_power", "qos_shortfall", "repair_qos", "column_bound",
           "branch_and_bound"]

log = logging.getLogger(__name__)


BOUNDS = ("valid", "ccp")


@dataclass(frozen=True)
class RecoverySettings:
    threshold: float = 0.5
    bnb_node_cap: int = 4096
    reopt_power: bool = True
    # branch-and-bound node bound: "valid" is a certified per-mBS bound,
    # "ccp" the (local, heuristic) CCP value of the node relaxation
    bound: str = "valid"

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.bnb_node_cap < 1:
            raise ValueError("bnb_node_cap must be >= 1")
        if self.bound not in BOUNDS:
            raise ValueError(f"bound must be one of {BOUNDS}")


def round_and_repair(scn: Scenario, cfg: InstanceConfig, relaxed: Solution,
                     s: RecoverySettings | None = None) -> Solution:
    """Threshold ``relaxed.x`` and repair C2, the cap ``L``, C3 and C5.

    Rows left empty get their largest relaxed entry; rows over the cap keep
    their ``L`` largest entries; empty columns take the user with the
    largest relaxed entry there. Columns over the power budget are scaled
    down proportionally. QoS is not enforced here.
    """
    s = s or RecoverySettings()
    xt = np.where(scn.in_coverage, relaxed.x, -np.inf)
    x = (xt >= s.threshold).astype(float)
    repaired = False
    L = cfg.limit(scn.m)
    for i in range(scn.n):
        if x[i].sum() == 0:
            x[i, np.argmax(xt[i])] = 1.0
            repaired = True
        elif x[i].sum() > L:
            keep = np.argsort(-xt[i], kind="stable")[:L]
            x[i] = 0.0
            x[i, keep] = 1.0
            repaired = True
    if np.any(x.sum(axis=0) == 0):
        x = repair_columns(x, np.where(scn.in_coverage, relaxed.x, -np.inf), L,
                           scn.in_coverage)
        repaired = True

    prm = scn.params
    p = np.where(x > 0, np.clip(relaxed.p, prm.p_min_mw, prm.p_max_mw), 0.0)
    load = p.sum(axis=0)
    over = load > prm.p_max_mw
    if over.any():
        p[:, over] *= prm.p_max_mw / load[over]
        repaired = True
    tags = ("rounded", "repaired") if repaired else ("rounded",)
    return Solution(x, p, integral=True, tags=tags)


def _column_power_program(chat, a, pmin):
    """Epigraph program for one mBS: max sum t s.t. t_i <= a_i log2(1 + c_i p_i),
    pmin <= p_i <= 1, sum p_i <= 1. Variables ``[p, t]``."""
    k = len(chat)
    dim = 2 * k
    P = np.arange(k)
    T = P + k
    rows, cols, vals, b, labels = [], [], [], [], []
    r = 0
    for i in range(k):
        rows += [r, r + 1]
        cols += [P[i], P[i]]
        vals += [-1.0, 1.0]
        b += [pmin, -1.0]
        labels += [("C4lo", (i,)), ("C4hi", (i,))]
        r += 2
    rows += [r] * k
    cols += P.tolist()
    vals += [1.0] * k
    b.append(-1.0)
    labels.append(("C5", ()))
    A = sp.csr_matrix((vals, (rows, cols)), shape=(r + 1, dim))
    fams = [AffineConstraints(A, b, labels),
            LogRateConstraints(dim, P, T, a, chat, [("rate", (i,)) for i in range(k)],
                               square=False)]
    obj = np.zeros(dim)
    obj[T] = 1.0
    return ConvexProgram(dim, obj, fams)


def _qos_power_program(chat, share, weights, owner, pmin, col, m, rmin):
    """Joint epigraph program over all links with per-user rate floors.

    Variables ``[p, t]`` with ``t_k <= share_k log2(1 + c_k p_k)`` (the
    normalized link rate), per-link boxes, per-mBS budgets and
    ``sum_{k of user i} t_k >= rmin``. Objective ``sum w_owner(k) t_k``.
    """
    K = len(chat)
    P = np.arange(K)
    T = P + K
    n = int(owner.max()) + 1
    eye = sp.identity(K, format="csr")
    zero = sp.csr_matrix((K, K))
    col_sum = sp.csr_matrix((np.ones(K), (col, P)), shape=(m, K))
    own_sum = sp.csr_matrix((np.ones(K), (owner, P)), shape=(n, K))
    A = sp.vstack([sp.hstack([-eye, zero]), sp.hstack([eye, zero]),
                   sp.hstack([col_sum, sp.csr_matrix((m, K))]),
                   sp.hstack([sp.csr_matrix((n, K)), -own_sum])]).tocsr()
    b = np.concatenate([np.full(K, pmin), -np.ones(K), -np.ones(m), np.full(n, rmin)])
    labels = ([("C4lo", (k,)) for k in range(K)] + [("C4hi", (k,)) for k in range(K)]
              + [("C5", (j,)) for j in range(m)] + [("C6", (i,)) for i in range(n)])
    fams = [AffineConstraints(A, b, labels),
            LogRateConstraints(2 * K, P, T, share, chat, [("rate", (k,)) for k in range(K)],
                               square=False)]
    obj = np.zeros(2 * K)
    obj[T] = weights[owner]
    return ConvexProgram(2 * K, obj, fams)


def _qos_powers(scn, cfg, x, settings):
    """Best powers for ``x`` meeting every user's minimum rate, or ``None``."""
    prm = scn.params
    rows, cols = np.nonzero(x)
    load = x.sum(axis=0)
    share = 1.0 / load[cols]
    chat = scn.snr_coeff[rows, cols] * prm.p_max_mw
    pmin = prm.p_min_mw / prm.p_max_mw
    prog = _qos_power_program(chat, share, cfg.weights, rows, pmin, cols, scn.m,
                              prm.r_min_bps / prm.bandwidth_hz)
    p0 = (1.0 + load[cols] * pmin) / (2.0 * load[cols])
    t0 = share * np.log2(1.0 + chat * p0) - 1e-3
    try:
        ph = phase1(prog, np.concatenate([p0, t0]), settings)
        if ph.status != "feasible":
            return None
        res = solve(prog, ph.z, settings)
    except SolverFailure:
        return None
    p = np.zeros_like(x)
    p[rows, cols] = np.clip(res.z_star[:len(rows)], pmin, 1.0) * prm.p_max_mw
    # the floors hold to solver tolerance; only accept a point that meets them
    if np.any(user_rates(scn, x, p) < prm.r_min_bps * (1 - 1e-9)):
        return None
    return p


def reoptimize_power(scn: Scenario, cfg: InstanceConfig, x_fixed, p_start=None,
                     settings: BarrierSettings | None = None) -> Solution:
    """Optimal powers for a fixed binary association.

    With ``x`` fixed the weighted objective separates over mBSs and is
    concave in the powers of each; every mBS with two or more users is
    solved with the barrier method (single-user mBSs transmit at
    ``P_max``). When ``cfg.enforce_qos`` and that optimum leaves a user
    below ``R_min``, the powers are re-solved jointly with the rate floors;
    if the floors cannot be met for this ``x`` the unconstrained optimum
    is returned and the shortfall is left to the feasibility report. If
    ``p_start`` is given, scores higher and keeps the QoS status, it is
    kept.
    """
    x = np.asarray(x_fixed, dtype=float)
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("x_fixed must be binary")
    prm = scn.params
    pmin = prm.p_min_mw / prm.p_max_mw
    chat_all = scn.snr_coeff * prm.p_max_mw
    p = np.zeros_like(x)
    for j in range(scn.m):
        users = np.nonzero(x[:, j])[0]
        k = users.size
        if k == 0:
            continue
        if k == 1:
            p[users, j] = prm.p_max_mw
            continue
        if k * pmin > 1:
            raise InfeasibleInstanceError(f"mBS {j}: minimum powers exceed the budget")
        a = cfg.weights[users] / k
        chat = chat_all[users, j]
        prog = _column_power_program(chat, a, pmin)
        p0 = np.full(k, (1.0 + k * pmin) / (2 * k)) if pmin > 0 else np.full(k, 0.5 / k)
        t0 = a * np.log2(1.0 + chat * p0) - 1.0
        ph = phase1(prog, np.concatenate([p0, t0]), settings)
        if ph.status != "feasible":
            raise SolverFailure(f"mBS {j}: power program has no interior")
        res = solve(prog, ph.z, settings)
        p[users, j] = np.clip(res.z_star[:k], pmin, 1.0) * prm.p_max_mw
    sol = Solution(x, p, integral=True, tags=("reoptimized",))
    qos_ok = False
    if cfg.enforce_qos:
        qos_ok = bool(np.all(user_rates(scn, x, p) >= prm.r_min_bps))
        if not qos_ok:
            pq = _qos_powers(scn, cfg, x, settings)
            if pq is not None:
                sol, qos_ok = Solution(x, pq, integral=True, tags=("reoptimized",)), True
    if p_start is not None:
        start = Solution(x, np.where(x > 0, p_start, 0.0), integral=True)
        keeps = not qos_ok or bool(np.all(user_rates(scn, x, start.p) >= prm.r_min_bps))
        if keeps and _power_feasible(scn, start) and \
                weighted_objective(scn, cfg, start) > weighted_objective(scn, cfg, sol):
            return Solution(x, start.p, integral=True, tags=("reoptimized",))
    return sol


def qos_shortfall(scn: Scenario, sol: Solution) -> tuple:
    """``(users below R_min, summed relative shortfall)``; ``(0, 0.0)`` means QoS met."""
    rates = user_rates(scn, sol.x, sol.p)
    short = np.maximum(0.0, 1.0 - rates / scn.params.r_min_bps)
    short[short <= 1e-9] = 0.0
    return int(np.count_nonzero(short)), float(short.sum())


class _PowerOracle:
    """Approximate optimal powers for candidate associations.

    Per mBS the weighted power problem is water-filling, solved by
    bisection on the water level. Rate floors are handled through their
    Lagrangian dual, which separates per mBS and is minimized with
    L-BFGS-B over ``lambda >= 0``. Values are cached per association.
    Used only to rank candidates; final powers come from
    :func:`reoptimize_power`.
    """

    LAMBDA_MAX = 1e3
    QOS_TOL = 1e-4

    def __init__(self, scn: Scenario, cfg: InstanceConfig):
        prm = scn.params
        self.chat = scn.snr_coeff * prm.p_max_mw
        self.pmin = prm.p_min_mw / prm.p_max_mw
        self.rho = prm.r_min_bps / prm.bandwidth_hz
        self.w = cfg.weights
        self.qos = cfg.enforce_qos
        self.n, self.m = scn.n, scn.m
        self.cache = {}
        self.evals = 0

    def _waterfill(self, c, b, col):
        """Maximize ``sum b log2(1 + c p)`` per column under ``sum p <= 1``."""
        if self.pmin == 0.0:
            return self._waterfill_exact(c, b, col)
        m = self.m
        k = np.bincount(col, minlength=m)
        lo = np.full(m, np.inf)
        hi = np.zeros(m)
        np.minimum.at(lo, col, b / (LN2 * (1.0 + 1.0 / c)))
        np.maximum.at(hi, col, b * c / LN2)
        lo, hi = np.log(np.where(k > 0, lo, 1.0)), np.log(np.where(k > 0, hi, 1.0)) + 1.0
        for _ in range(30):  # log-scale bracket, ample for ranking
            mid = 0.5 * (lo + hi)
            p = np.clip(b / (np.exp(mid[col]) * LN2) - 1.0 / c, self.pmin, 1.0)
            over = np.bincount(col, p, minlength=m) > 1.0
            lo = np.where(over, mid, lo)
            hi = np.where(over, hi, mid)
        p = np.clip(b / (np.exp(hi[col]) * LN2) - 1.0 / c, self.pmin, 1.0)
        return np.where(k[col] == 1, 1.0, p)

    def _waterfill_exact(self, c, b, col):
        # p = max(0, mu b - 1/c); links enter in order of 1/(b c), so the
        # active set of each column is a prefix of that order
        theta = 1.0 / (b * c)
        order = np.lexsort((theta, col))
        cs = col[order]
        first = np.searchsorted(cs, np.arange(self.m))
        Cb = np.cumsum(b[order])
        Ci = np.cumsum(1.0 / c[order])
        head = first[cs]
        sb = Cb - np.where(head > 0, Cb[head - 1], 0.0)
        si = Ci - np.where(head > 0, Ci[head - 1], 0.0)
        mu = (1.0 + si) / sb
        count = np.bincount(cs[mu > theta[order]], minlength=self.m)
        last = first + np.maximum(count, 1) - 1
        mu_col = mu[np.minimum(last, len(mu) - 1)]
        return np.maximum(0.0, mu_col[col] * b - 1.0 / c)

    def __call__(self, x, floor=None):
        """``(users short, summed shortfall, -objective)``; smaller is better.

        With ``floor`` (a QoS-feasible ``-objective`` to beat), candidates
        that cannot beat it get a worst-case score without the dual solve.
        """
        key = x.tobytes()
        if key in self.cache:
            return self.cache[key]
        self.evals += 1
        rows, cols = np.nonzero(x)
        share = 1.0 / x.sum(axis=0)[cols]
        c = self.chat[rows, cols]

        def rates(lam):
            p = self._waterfill(c, share * (self.w[rows] + lam[rows]), cols)
            link = share * np.log2(1.0 + c * p)
            return np.bincount(rows, link, minlength=self.n)

        lam = np.zeros(self.n)
        r = rates(lam)
        if self.qos and np.any(r < self.rho):
            def dual(l):
                p = self._waterfill(c, share * (self.w[rows] + l[rows]), cols)
                link = share * np.log2(1.0 + c * p)
                ru = np.bincount(rows, link, minlength=self.n)
                return (self.w + l) @ ru - self.rho * l.sum(), ru - self.rho

            if floor is not None and -float(self.w @ r) >= floor:
                # the QoS-free optimum bounds the constrained one, so no gain
                score = (self.n, np.inf, 0.0)
                self.cache[key] = score
                return score
            res = minimize(dual, lam, jac=True, method="L-BFGS-B",
                           bounds=[(0.0, self.LAMBDA_MAX)] * self.n)
            r = rates(res.x)
        short = np.maximum(0.0, 1.0 - r / self.rho) if self.qos else np.zeros(self.n)
        short[short <= self.QOS_TOL] = 0.0
        score = (int(np.count_nonzero(short)), float(short.sum()), -float(self.w @ r))
        self.cache[key] = score
        return score


def _single_link_moves(scn, x, L, order=None):
    """Every association one link away: add, drop or move one link.

    Candidates keep C2, C3, the cap ``L`` and coverage. ``order`` (an
    ``(n, m)`` score) puts promising additions first.
    """
    allowed = scn.in_coverage
    rowsum, colsum = x.sum(axis=1), x.sum(axis=0)
    score = order if order is not None else scn.snr_coeff
    for i in range(scn.n):
        on = np.nonzero(x[i])[0]
        off = [j for j in np.argsort(-score[i], kind="stable") if allowed[i, j] and not x[i, j]]
        for j in off:
            if rowsum[i] < L:
                y = x.copy()
                y[i, j] = 1.0
                yield y
            for q in on:
                if colsum[q] > 1:
                    y = x.copy()
                    y[i, q] = 0.0
                    y[i, j] = 1.0
                    yield y
        if rowsum[i] > 1:
            for q in on:
                if colsum[q] > 1:
                    y = x.copy()
                    y[i, q] = 0.0
                    yield y


def repair_qos(scn: Scenario, cfg: InstanceConfig, x, settings: BarrierSettings | None = None,
               order=None, max_evals: int | None = None) -> Solution:
    """Local search over single-link moves toward a good QoS-feasible association.

    Moves add, drop or move one link. While QoS is missed, a move is taken
    if it reduces the number of users below ``R_min`` (then the summed
    relative shortfall); once QoS holds, if it raises the objective with
    QoS kept. The first improving move is taken and the scan restarts.
    Candidates are ranked by a fast water-filling estimate; the final
    association gets its powers from :func:`reoptimize_power`, and may
    still miss QoS.

    Parameters
    ----------
    x : array
        Binary ``(n, m)`` start, or a stack ``(k, n, m)`` of starts searched
        in turn with a shared cache; the best local optimum is returned.
    order : array, optional
        Per-pair score ranking the additions tried first (e.g. the relaxed
        association); the SNR coefficient by default.
    max_evals : int, optional
        Budget of distinct candidate evaluations per start, ``8 n m`` by
        default.
    """
    starts = np.asarray(x, dtype=float)
    if starts.ndim == 2:
        starts = starts[None]
    L = cfg.limit(scn.m)
    oracle = _PowerOracle(scn, cfg)
    budget = max_evals if max_evals is not None else 8 * scn.n * scn.m
    best = None
    for cur in starts:
        cur_score = oracle(cur)
        used = oracle.evals
        improved = True
        while improved and oracle.evals - used < budget:
            improved = False
            for y in _single_link_moves(scn, cur, L, order):
                if oracle.evals - used >= budget:
                    break
                s = oracle(y, cur_score[2] if cur_score[0] == 0 else None)
                if s < cur_score:
                    cur_score, cur, improved = s, y, True
                    break
        if best is None or cur_score < best[0]:
            best = (cur_score, cur)
    sol = reoptimize_power(scn, cfg, best[1], settings=settings)
    return Solution(sol.x, sol.p, integral=True, tags=("qos-repaired",))


def _power_feasible(scn, sol) -> bool:
    prm = scn.params
    on = sol.x > 0
    if np.any(sol.p[on] < prm.p_min_mw) or np.any(sol.p > prm.p_max_mw):
        return False
    return bool(np.all((sol.x * sol.p).sum(axis=0) <= prm.p_max_mw))


@dataclass
class BnbResult:
    solution: Solution | None
    objective: float
    exhaustive: bool
    nodes: int


def column_bound(scn: Scenario, cfg: InstanceConfig, pat) -> float:
    """Upper bound on the weighted objective over binary ``x`` in ``pat``.

    An mBS's contribution is the average of ``w_i W log2(1 + c_ij p_ij)``
    over its users, which is at most the average of the full-power values;
    the best average over user sets containing the fixed ones is found
    greedily. Row constraints are ignored, so the bound is valid but loose.
    """
    prm = scn.params
    val = cfg.weights[:, None] * prm.bandwidth_hz * np.log2(1.0 + scn.snr_coeff * prm.p_max_mw)
    total = 0.0
    for j in range(scn.m):
        one = pat.fixed_one[:, j]
        rest = np.sort(val[pat.active[:, j] & ~one, j])[::-1]
        if not one.any():
            total += rest[0]
            continue
        s, k = val[one, j].sum(), int(one.sum())
        for r in rest:
            if r * k <= s:
                break
            s, k = s + r, k + 1
        total += s / k
    return float(total)


def branch_and_bound(scn: Scenario, cfg: InstanceConfig, s: RecoverySettings | None = None,
                     ccp: CcpSettings | None = None) -> BnbResult:
    """Best-first search over binary associations.

    Each node fixes a subset of ``x`` entries. With ``bound="valid"`` the
    node bound is :func:`column_bound`, so ``exhaustive=True`` certifies
    the incumbent as optimal; the root CCP relaxation only seeds the
    incumbent and the branching order. With ``bound="ccp"`` every node runs
    CCP with its entries fixed and uses ``W * sum(u)`` as the bound; CCP is
    local, so then ``exhaustive`` only means the search finished within
    ``bnb_node_cap`` nodes. Leaves are scored with :func:`reoptimize_power`.
    With QoS enforced, leaves that miss it are kept only as a fallback.
    """
    s = s or RecoverySettings()
    ccp = ccp or CcpSettings()
    W = scn.params.bandwidth_hz
    L = cfg.limit(scn.m)
    tie = itertools.count()
    nodes = 0
    best_sol, best_val = None, -np.inf
    # leaves missing QoS only serve as a fallback and never prune
    spare_sol, spare_val = None, -np.inf

    def consider(sol):
        nonlocal best_sol, best_val, spare_sol, spare_val
        val = weighted_objective(scn, cfg, sol)
        if cfg.enforce_qos and np.any(user_rates(scn, sol.x, sol.p) < scn.params.r_min_bps):
            if val > spare_val:
                spare_sol, spare_val = sol, val
        elif val > best_val:
            best_sol, best_val = sol, val

    def seed_incumbent(pt):
        rounded = round_and_repair(scn, cfg, pt.solution(), s)
        consider(reoptimize_power(scn, cfg, rounded.x, settings=ccp.inner))

    def evaluate(fixed):
        """Return ``None`` (pruned or leaf) or ``(bound, branching x, CCP point)``."""
        nonlocal nodes
        try:
            pat = association_pattern(scn, cfg, fixed)
        except InfeasibleInstanceError:
            return None
        if not pat.free.any():
            x = pat.fixed_one.astype(float)
            if _association_ok(x, L):
                consider(reoptimize_power(scn, cfg, x, settings=ccp.inner))
            return None
        nodes += 1
        if s.bound == "valid":
            return column_bound(scn, cfg, pat), order_x, None
        pt, tr = run_ccp(scn, cfg, ccp, fixed=fixed)
        if pt is None or tr.stop_reason == "infeasible":
            return None
        return W * float(pt.u.sum()), pt.x, pt

    root = np.full((scn.n, scn.m), -1)
    order_x = np.where(scn.in_coverage, 0.5, 0.0)
    if s.bound == "valid":
        try:
            pt, tr = run_ccp(scn, cfg, ccp)
            if pt is not None and tr.stop_reason != "infeasible":
                order_x = pt.x
                seed_incumbent(pt)
        except (SolverFailure, InfeasibleInstanceError) as exc:
            log.info("root relaxation unavailable (%s); branching without it", exc)
    heap = []
    first = evaluate(root)
    if first is not None:
        if s.bound == "ccp":
            seed_incumbent(first[2])
        heapq.heappush(heap, (-first[0], next(tie), root, first[1]))

    capped = False
    while heap:
        neg_bound, _, fixed, xr = heapq.heappop(heap)
        if nodes >= s.bnb_node_cap:
            capped = True
            break
        if -neg_bound <= best_val * (1 + 1e-9):
            continue
        pat = association_pattern(scn, cfg, fixed)
        cand = np.argwhere(pat.free)
        frac = np.abs(xr[pat.free] - 0.5)
        i, j = cand[int(np.argmin(frac))]
        for val in (1, 0):
            if nodes >= s.bnb_node_cap:
                capped = True
                break
            child = fixed.copy()
            child[i, j] = val
            out = evaluate(child)
            if out is not None and out[0] > best_val * (1 + 1e-9):
                heapq.heappush(heap, (-out[0], next(tie), child, out[1]))
        if capped:
            break

    if best_sol is None:
        best_sol, best_val = spare_sol, spare_val
    tag = "bnb-capped" if capped else "bnb-exhaustive"
    if best_sol is not None:
        best_sol = Solution(best_sol.x, best_sol.p, integral=True, tags=(tag,))
    return BnbResult(best_sol, best_val, not capped, nodes)


def _association_ok(x, L) -> bool:
    rows = x.sum(axis=1)
    return bool(np.all(rows >= 1) and np.all(rows <= L) and np.all(x.sum(axis=0) >= 1))
