"""Problem data for joint association / power allocation.

Holds the weighted-sum instance configuration, solution containers, the
feasibility checker for the binary problem (constraints C1-C6 plus the
optional per-user association cap ``L``), the weighted objective and the
lifting to the auxiliary ``(u, v)`` variables.

The optimizer works in normalized units: powers divided by ``P_max`` and
rates divided by ``W`` (spectral efficiency). Public functions take and
return physical units; the conversions live here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleInstanceError
from .scenario import Scenario, user_rates

__all__ = [
    "InstanceConfig",
    "Solution",
    "LiftedPoint",
    "Violation",
    "FeasibilityReport",
    "AssociationPattern",
    "check_op1",
    "weighted_objective",
    "lift_to_op3",
    "association_pattern",
    "nearest_association",
    "repair_columns",
    "normalized_coeff",
    "normalized_rmin",
]


@dataclass(frozen=True)
class InstanceConfig:
    """Weights, association cap and QoS switch for one scalarized instance.

    ``max_assoc=None`` means unbounded (``L = m``).
    """

    weights: np.ndarray
    max_assoc: int | None = None
    enforce_qos: bool = True

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size < 1 or np.any(w <= 0):
            raise ValueError("weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 (got {w.sum()!r})")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.max_assoc is not None and self.max_assoc < 1:
            raise ValueError("max_assoc must be >= 1")

    @classmethod
    def equal(cls, n: int, max_assoc=None, enforce_qos=True) -> "InstanceConfig":
        w = np.full(n, 1.0 / n)
        # make the sum exactly 1 in floating point
        w[-1] = 1.0 - w[:-1].sum()
        return cls(w, max_assoc, enforce_qos)

    def limit(self, m: int) -> int:
        return m if self.max_assoc is None else min(self.max_assoc, m)


@dataclass(frozen=True)
class Solution:
    """Association ``x`` (binary or relaxed) and power ``p`` in mW."""

    x: np.ndarray
    p: np.ndarray
    integral: bool = False
    tags: tuple = ()

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        p = np.array(self.p, dtype=float)
        if x.shape != p.shape or x.ndim != 2:
            raise ValueError("x and p must be matrices of equal shape")
        if self.integral and not np.all((x == 0) | (x == 1)):
            raise ValueError("integral solution with non-binary x")
        x.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "p", p)

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "p_mw": self.p.tolist(),
                "integral": self.integral, "tags": list(self.tags)}

    @classmethod
    def from_dict(cls, doc) -> "Solution":
        return cls(doc["x"], doc["p_mw"], doc.get("integral", False),
                   tuple(doc.get("tags", ())))


@dataclass(frozen=True)
class LiftedPoint:
    """``(x, p, u, v)`` iterate. ``p`` is in mW; ``u`` and ``v`` are in
    normalized rate units (rate / W and its square root)."""

    x: np.ndarray
    p: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("x", "p", "u", "v"):
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def solution(self) -> Solution:
        return Solution(self.x, self.p)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("x", "p", "u", "v")}


@dataclass(frozen=True)
class Violation:
    constraint: str
    index: tuple
    residual: float


@dataclass
class FeasibilityReport:
    violated: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violated

    def ids(self) -> set:
        return {v.constraint for v in self.violated}

    def without(self, *ids) -> "FeasibilityReport":
        return FeasibilityReport([v for v in self.violated if v.constraint not in ids])

    def __str__(self):
        if self.ok:
            return "feasible"
        return "; ".join(f"{v.constraint}{list(v.index)}: {v.residual:.4g}"
                         for v in self.violated)


def normalized_coeff(scn: Scenario) -> np.ndarray:
    """SNR coefficients per unit of normalized power ``p / P_max``."""
    return scn.snr_coeff * scn.params.p_max_mw


def normalized_rmin(scn: Scenario) -> float:
    return scn.params.r_min_bps / scn.params.bandwidth_hz


def check_op1(scn: Scenario, cfg: InstanceConfig, sol: Solution,
              tol: float = 1e-9) -> FeasibilityReport:
    """Evaluate C1-C6 and the association cap on ``sol``.

    Residuals are positive violation magnitudes: association counts for
    C2/C3/L, mW for C4/C5 and bit/s for C6. ``COV`` flags a positive
    association outside coverage. C1 is only checked for solutions flagged
    integral; C6 only when ``cfg.enforce_qos``.
    """
    x, p = sol.x, sol.p
    if x.shape != (scn.n, scn.m):
        raise ValueError("solution shape does not match scenario")
    prm = scn.params
    L = cfg.limit(scn.m)
    out = []

    def add(cid, mask, resid):
        for idx in zip(*np.nonzero(mask)):
            out.append(Violation(cid, tuple(int(k) for k in idx), float(resid[idx])))

    if sol.integral:
        frac = np.minimum(np.abs(x), np.abs(x - 1))
        add("C1", frac > tol, frac)
    else:
        lo, hi = -x, x - 1
        add("C1", lo > tol, lo)
        add("C1", hi > tol, hi)
    add("COV", (x > tol) & ~scn.in_coverage, x)

    rows = x.sum(axis=1)
    cols = x.sum(axis=0)
    add("C2", 1 - rows > tol, 1 - rows)
    add("L", rows - L > tol, rows - L)
    add("C3", 1 - cols > tol, 1 - cols)

    pmin = np.where(x > 0, prm.p_min_mw, 0.0)
    ptol = tol * prm.p_max_mw
    add("C4", pmin - p > ptol, pmin - p)
    add("C4", p - prm.p_max_mw > ptol, p - prm.p_max_mw)
    load = (x * p).sum(axis=0) - prm.p_max_mw
    add("C5", load > ptol, load)

    if cfg.enforce_qos and np.all(p >= 0) and np.all(x >= 0) and not any(v.constraint == "COV" for v in out):
        short = prm.r_min_bps - user_rates(scn, x, p)
        add("C6", short > tol * max(prm.r_min_bps, 1.0), short)
    return FeasibilityReport(out)


def weighted_objective(scn: Scenario, cfg: InstanceConfig, sol: Solution) -> float:
    """Weighted sum of user rates in bit/s."""
    return float(cfg.weights @ user_rates(scn, sol.x, sol.p))


def lift_to_op3(scn: Scenario, cfg: InstanceConfig, sol: Solution) -> LiftedPoint:
    """Attach auxiliaries with the two rate constraints tight.

    ``v_ij = sqrt(x_ij * w_i * log2(1 + c_ij p_ij))`` and
    ``u_ij = v_ij^2 / sum_i x_ij``, both normalized by ``W``; ``sum(u)``
    then equals the weighted objective divided by ``W``.
    """
    x, p = sol.x, sol.p
    if np.any(p < 0):
        raise ValueError("negative power")
    se = np.log2(1.0 + scn.snr_coeff * p)
    v2 = x * cfg.weights[:, None] * se
    v = np.sqrt(np.maximum(v2, 0.0))
    load = x.sum(axis=0)
    u = np.where(load > 0, v2 / np.where(load > 0, load, 1.0), 0.0)
    return LiftedPoint(x, p, u, v)


@dataclass(frozen=True)
class AssociationPattern:
    """Structural presolve of the association constraints.

    ``active`` marks pairs whose ``x`` may be positive; ``fixed_one`` marks
    pairs forced to 1. Row bounds apply to the free (active, not fixed)
    entries only: ``row_lo[i]`` is 1 when a lower bound of 1 is needed and
    0 otherwise; ``row_hi[i]`` is the upper bound or ``inf`` when it can
    never bind. ``row_eq`` marks rows where both coincide. ``col_lo[j]``
    flags columns that still need ``sum >= 1``.
    """

    active: np.ndarray
    fixed_one: np.ndarray
    row_lo: np.ndarray
    row_hi: np.ndarray
    row_eq: np.ndarray
    col_lo: np.ndarray

    @property
    def free(self) -> np.ndarray:
        return self.active & ~self.fixed_one


def association_pattern(scn: Scenario, cfg: InstanceConfig, fixed=None) -> AssociationPattern:
    """Propagate forced associations until stable.

    ``fixed`` is an optional int matrix with -1 (free), 0 or 1 entries
    (used by branch-and-bound). A row or column with a single admissible
    pair fixes that pair to 1; a row whose fixed ones reach ``L`` loses its
    remaining pairs.

    Raises
    ------
    InfeasibleInstanceError
        When some row or column has no admissible pair, or fixed ones
        exceed ``L``.
    """
    n, m = scn.n, scn.m
    L = cfg.limit(m)
    active = scn.in_coverage.copy()
    one = np.zeros((n, m), dtype=bool)
    if fixed is not None:
        fixed = np.asarray(fixed)
        if np.any((fixed == 1) & ~active):
            raise InfeasibleInstanceError("pair fixed to 1 outside coverage")
        active &= fixed != 0
        one |= fixed == 1

    changed = True
    while changed:
        changed = False
        if not active.any(axis=1).all():
            raise InfeasibleInstanceError("a user has no admissible mBS")
        if not active.any(axis=0).all():
            raise InfeasibleInstanceError("an mBS has no admissible user")
        for axis in (0, 1):
            single = active.sum(axis=axis) == 1
            mask = active & (single[None, :] if axis == 0 else single[:, None])
            new = mask & ~one
            if new.any():
                one |= new
                changed = True
        nf = one.sum(axis=1)
        if np.any(nf > L):
            raise InfeasibleInstanceError("fixed associations exceed the per-user cap")
        full = (nf == L)[:, None] & active & ~one
        if full.any():
            active &= ~full
            changed = True

    free = active & ~one
    nf = one.sum(axis=1)
    row_lo = ((nf == 0) & free.any(axis=1)).astype(float)
    hi = (L - nf).astype(float)
    row_hi = np.where(hi < free.sum(axis=1), hi, np.inf)
    row_eq = (row_lo > 0) & (row_hi == row_lo)
    col_lo = ~one.any(axis=0)
    return AssociationPattern(active, one, row_lo, row_hi, row_eq, col_lo)


def nearest_association(scn: Scenario, L: int, allowed=None) -> np.ndarray:
    """Associate every user with its ``L`` nearest admissible mBSs."""
    allowed = scn.in_coverage if allowed is None else allowed
    d = np.where(allowed, scn.distance, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    x = np.zeros((scn.n, scn.m))
    for i in range(scn.n):
        k = min(L, int(allowed[i].sum()))
        x[i, order[i, :k]] = 1.0
    return x


def repair_columns(x, score, L, allowed, locked=None) -> np.ndarray:
    """Give every userless mBS one user, preferring high ``score``.

    Userless mBSs are served in order of their best admissible score. Users with spare capacity (row sum below ``L``) are preferred; failing
    that, the best-scored admissible user gives up its lowest-scored
    association whose mBS keeps another user. ``locked`` pairs are never
    dropped.
    """
    x = np.array(x, dtype=float)
    locked = np.zeros_like(allowed) if locked is None else locked
    empty = [j for j in range(x.shape[1]) if x[:, j].sum() == 0]
    for j in empty:
        if not allowed[:, j].any():
            raise InfeasibleInstanceError(f"mBS {j} has no admissible user")
    # strongest claim first, so the result does not depend on mBS order;
    # stealing only touches mBSs with two or more users, so none empties
    best = {j: np.max(np.where(allowed[:, j], score[:, j], -np.inf)) for j in empty}
    for j in sorted(empty, key=lambda j: -best[j]):
        cand = np.nonzero(allowed[:, j])[0]
        cand = cand[np.argsort(-score[cand, j], kind="stable")]
        spare = [i for i in cand if x[i].sum() < L]
        if spare:
            x[spare[0], j] = 1.0
            continue
        for i in cand:
            drop = [k for k in np.nonzero(x[i])[0]
                    if x[:, k].sum() >= 2 and not locked[i, k]]
            if drop:
                k = min(drop, key=lambda k: score[i, k])
                x[i, k] = 0.0
                x[i, j] = 1.0
                break
        else:
            raise InfeasibleInstanceError(f"cannot give mBS {j} a user within the cap")
    return x


def save_json(path, **docs) -> None:
    with open(path, "w") as fh:
        json.dump(docs, fh, indent=2)
