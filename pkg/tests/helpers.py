"""Independent oracles shared by several test modules."""

import itertools
import math

import numpy as np


def snr_coeff(d, alpha=2.0, h=1.0, lam=5e-3, bw=100e6, n0_dbm=-174.0):
    """Scalar SNR coefficient per mW, from the link budget written out by hand."""
    noise_mw = bw * 10 ** (n0_dbm / 10)
    return d ** -alpha * h * (lam / (4 * math.pi)) ** 2 / noise_mw


def waterfill(c, w, budget=1.0, iters=200):
    """Maximize sum w_k log2(1 + c_k p_k) s.t. sum p = budget, p >= 0.

    KKT: p_k = max(0, w_k / (nu ln2) - 1 / c_k); bisection on nu.
    """
    c = np.asarray(c, float)
    w = np.asarray(w, float)

    def alloc(nu):
        return np.maximum(0.0, w / (nu * math.log(2)) - 1.0 / c)

    lo, hi = 1e-12, 1e12
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if alloc(mid).sum() > budget:
            lo = mid
        else:
            hi = mid
    p = alloc(hi)
    return p, float(np.sum(w * np.log2(1 + c * p)))


def feasible_associations(allowed, L):
    """Every binary x on ``allowed`` with row sums in [1, L] and column sums >= 1."""
    n, m = allowed.shape
    cells = [(i, j) for i in range(n) for j in range(m) if allowed[i, j]]
    for bits in itertools.product((0, 1), repeat=len(cells)):
        x = np.zeros((n, m))
        for (i, j), b in zip(cells, bits):
            x[i, j] = b
        r = x.sum(axis=1)
        if r.min() >= 1 and r.max() <= L and x.sum(axis=0).min() >= 1:
            yield x
