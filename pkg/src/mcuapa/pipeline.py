"""End-to-end joint association and power allocation.

``mcua_pa`` chains the nearest-mBS start, the convex-concave procedure,
integer recovery and power re-optimization, then audits the result
against the original constraints. Reported rates are always recomputed
from ``(x, p)``; the solver's auxiliary objective is kept for reference
only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .ccp import CcpSettings, CcpTrace, run_ccp, start_association
from .errors import InfeasibleInstanceError
from .model import (FeasibilityReport, InstanceConfig, Solution, check_op1,
                    weighted_objective)
from .recover import (RecoverySettings, branch_and_bound, qos_shortfall, reoptimize_power,
                      repair_qos, round_and_repair)
from .scenario import Scenario, user_rates

__all__ = ["SolveReport", "mcua_pa", "RECOVERY_MODES"]

log = logging.getLogger(__name__)

RECOVERY_MODES = ("round", "bnb", "auto")
# "auto" runs branch-and-bound when the instance has at most this many pairs
AUTO_BNB_PAIRS = 6
# extra rounding thresholds tried when the first rounding misses QoS
QOS_THRESHOLDS = (0.1, 0.02)


@dataclass
class SolveReport:
    """Outcome of one joint solve; ``status`` is ``"ok"`` or ``"infeasible"``."""

    status: str
    reason: str = ""
    relaxed: Solution | None = None
    relaxed_objective: float = float("nan")
    surrogate_objective: float = float("nan")
    solution: Solution | None = None
    objective: float = float("nan")
    rates: np.ndarray | None = None
    qos_met: bool = False
    feasibility: FeasibilityReport | None = None
    trace: CcpTrace = field(default_factory=CcpTrace)
    recovery: str = ""

    @property
    def total_rate(self) -> float:
        return float(np.sum(self.rates)) if self.rates is not None else float("nan")

    def to_dict(self) -> dict:
        doc = {"status": self.status, "reason": self.reason}
        if self.status != "ok":
            return doc
        doc.update(
            relaxed_objective_bps=self.relaxed_objective,
            surrogate_objective_bps=self.surrogate_objective,
            integral_objective_bps=self.objective,
            total_rate_bps=self.total_rate,
            user_rates_bps=self.rates.tolist(),
            qos_met=self.qos_met,
            violations=[[v.constraint, list(v.index), v.residual]
                        for v in self.feasibility.violated],
            recovery=self.recovery,
            provenance=list(self.solution.tags),
            association=self.solution.x.tolist(),
            power_mw=self.solution.p.tolist(),
            relaxed_association=self.relaxed.x.tolist(),
            relaxed_power_mw=self.relaxed.p.tolist(),
            ccp_outer_iterations=self.trace.outer_iterations,
            ccp_stop_reason=self.trace.stop_reason,
        )
        return doc


def _qos_recovery(scn, cfg, relaxed, first, rs, inner) -> Solution:
    """Recovery when plain rounding misses QoS.

    The relaxed optimum usually sits on the rate floors, so rounding it
    tends to push a few users just below them. Candidates are the rounding
    at lower thresholds (keeping more of the secondary links), the
    nearest-mBS start associations (at the cap and with one link per user)
    and the best local optimum of :func:`repair_qos` started from each of
    them. The best candidate meeting QoS wins; if none does, the one
    closest to QoS is returned.
    """
    cands = [first]
    seen = {first.x.tobytes()}
    xs = [(round_and_repair(scn, cfg, relaxed, replace(rs, threshold=th)).x, "rounded")
          for th in QOS_THRESHOLDS if th < rs.threshold]
    xs.append((start_association(scn, cfg), "start"))
    if cfg.limit(scn.m) > 1:
        # a single link per user is also feasible and often the better basin under QoS
        try:
            xs.append((start_association(scn, replace(cfg, max_assoc=1)), "start"))
        except InfeasibleInstanceError:
            pass
    for x, tag in xs:
        if x.tobytes() in seen:
            continue
        seen.add(x.tobytes())
        cand = reoptimize_power(scn, cfg, x, settings=inner)
        cands.append(Solution(cand.x, cand.p, integral=True, tags=(tag, "reoptimized")))
    # local search from every candidate, as they sit in different basins
    # (one link per user vs many); additions are ranked by the relaxed x
    fixed = repair_qos(scn, cfg, np.stack([c.x for c in cands]), settings=inner,
                       order=relaxed.x)
    if fixed.x.tobytes() not in seen:
        cands.append(Solution(fixed.x, fixed.p, integral=True, tags=fixed.tags))
    ok = [c for c in cands if qos_shortfall(scn, c)[0] == 0]
    if ok:
        return max(ok, key=lambda c: weighted_objective(scn, cfg, c))
    return min(cands, key=lambda c: qos_shortfall(scn, c))


def mcua_pa(scn: Scenario, cfg: InstanceConfig, ccp: CcpSettings | None = None,
            recovery: RecoverySettings | None = None, mode: str = "round",
            trace_path=None) -> SolveReport:
    """Solve one instance and return an audited integral solution.

    Parameters
    ----------
    mode : {"round", "bnb", "auto"}
        Integer recovery route. ``"auto"`` uses branch-and-bound for tiny
        instances and rounding otherwise.

    Notes
    -----
    Structural or QoS infeasibility yields ``status="infeasible"``;
    numerical breakdown raises :class:`~mcuapa.errors.SolverFailure`.
    """
    if mode not in RECOVERY_MODES:
        raise ValueError(f"mode must be one of {RECOVERY_MODES}")
    ccp = ccp or CcpSettings()
    rs = recovery or RecoverySettings()
    try:
        point, trace = run_ccp(scn, cfg, ccp, trace_path=trace_path)
    except InfeasibleInstanceError as exc:
        return SolveReport("infeasible", reason=str(exc))
    if point is None or trace.stop_reason == "infeasible":
        return SolveReport("infeasible", reason="no strictly feasible point for the relaxation",
                           trace=trace)

    W = scn.params.bandwidth_hz
    relaxed = point.solution()
    use_bnb = mode == "bnb" or (mode == "auto" and scn.n * scn.m <= AUTO_BNB_PAIRS)
    if use_bnb:
        res = branch_and_bound(scn, cfg, rs, ccp)
        sol, route = res.solution, "bnb"
    else:
        rounded = round_and_repair(scn, cfg, relaxed, rs)
        sol, route = rounded, "round"
        if rs.reopt_power:
            re = reoptimize_power(scn, cfg, rounded.x, p_start=rounded.p, settings=ccp.inner)
            sol = Solution(re.x, re.p, integral=True, tags=rounded.tags + re.tags)
            if cfg.enforce_qos and qos_shortfall(scn, sol)[0]:
                sol = _qos_recovery(scn, cfg, relaxed, sol, rs, ccp.inner)
    if sol is None:
        return SolveReport("infeasible", reason="no integral association found", trace=trace)

    rates = user_rates(scn, sol.x, sol.p)
    report = check_op1(scn, cfg, sol)
    qos = bool(np.all(rates >= scn.params.r_min_bps * (1 - 1e-9)))
    return SolveReport(
        "ok", relaxed=relaxed,
        relaxed_objective=weighted_objective(scn, cfg, relaxed),
        surrogate_objective=W * float(point.u.sum()),
        solution=sol, objective=float(cfg.weights @ rates), rates=rates,
        qos_met=qos, feasibility=report, trace=trace, recovery=route)
