"""Comparison methods: proximity association and a random feasible sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import InstanceConfig, Solution, nearest_association, repair_columns
from .recover import reoptimize_power
from .scenario import Scenario, user_rates

__all__ = ["pop_ua_pa", "Sample", "random_feasible", "sample_max",
           "substream"]

# rejection attempts per draw before the repair fallback kicks in
MAX_REJECT = 200


def pop_ua_pa(scn: Scenario, cfg: InstanceConfig, L: int, settings=None) -> Solution:
    """Proximity baseline.

    Every user is associated with its ``min(L, covered)`` nearest mBSs,
    userless mBSs take their nearest user, and the powers are optimal for
    that association.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    x = nearest_association(scn, L)
    x = repair_columns(x, -scn.distance, L, scn.in_coverage)
    sol = reoptimize_power(scn, cfg, x, settings=settings)
    return Solution(sol.x, sol.p, integral=True, tags=("pop",))


@dataclass(frozen=True)
class Sample:
    index: int
    solution: Solution
    objective: float
    meets_qos: bool


def substream(seed: int, worker: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, worker)`` via ``SeedSequence([seed, worker])``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(worker)]))


def _draw_association(rng, allowed, L):
    n, m = allowed.shape
    for _ in range(MAX_REJECT):
        x = (rng.random((n, m)) < 0.5) & allowed
        rows = x.sum(axis=1)
        if rows.min() >= 1 and rows.max() <= L and x.sum(axis=0).min() >= 1:
            return x.astype(float)
    # fallback: patch the last draw
    x = x.astype(float)
    for i in range(n):
        on = np.nonzero(x[i])[0]
        if on.size == 0:
            x[i, rng.choice(np.nonzero(allowed[i])[0])] = 1.0
        elif on.size > L:
            x[i, rng.permutation(on)[L:]] = 0.0
    return repair_columns(x, rng.random((n, m)), L, allowed)


def _draw_powers(rng, x, p_min, p_max):
    p = np.where(x > 0, rng.uniform(p_min, p_max, size=x.shape), 0.0)
    k = x.sum(axis=0)
    load = p.sum(axis=0)
    over = load > p_max
    if over.any():
        # shrink the part above p_min so both power bounds survive
        f = (p_max - k[over] * p_min) / (load[over] - k[over] * p_min)
        p[:, over] = np.where(x[:, over] > 0, p_min + (p[:, over] - p_min) * f, 0.0)
    return p


def random_feasible(scn: Scenario, cfg: InstanceConfig, count: int, seed: int,
                    worker: int = 0, start: int = 0):
    """Yield ``count`` random resource-feasible solutions.

    Associations are uniform over the covered pairs conditioned on every
    row holding 1 to ``L`` entries and every column at least one (by
    rejection, with a repair fallback). Powers are uniform on the per-link
    box, then columns over budget are shrunk. QoS is not enforced; it is
    reported per sample.

    Parameters
    ----------
    start : int
        Index of the first draw, so split streams keep global indices.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = substream(seed, worker)
    prm = scn.params
    L = cfg.limit(scn.m)
    for k in range(count):
        x = _draw_association(rng, scn.in_coverage, L)
        p = _draw_powers(rng, x, prm.p_min_mw, prm.p_max_mw)
        sol = Solution(x, p, integral=True, tags=("random",))
        rates = user_rates(scn, x, p)
        yield Sample(start + k, sol, float(cfg.weights @ rates),
                     bool(np.all(rates >= prm.r_min_bps)))


def sample_max(scn: Scenario, cfg: InstanceConfig, count: int, seed: int) -> float:
    """Largest weighted objective over ``count`` draws (``-inf`` if none)."""
    best = -np.inf
    for s in random_feasible(scn, cfg, count, seed):
        best = max(best, s.objective)
    return best
