"""Network geometry, channel model and downlink rates.

Units are fixed throughout: powers in mW, distances in m, rates in bit/s.
The dBm to mW conversion of the noise density happens once, in
:func:`build_scenario`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InfeasibleGeometryError

__all__ = [
    "ChannelParams",
    "Placement",
    "FadingModel",
    "Scenario",
    "MIN_SEPARATION_M",
    "generate_placement",
    "build_scenario",
    "user_rates",
    "link_rates",
]

#: Minimum user to mBS distance; closer draws are rejected.
MIN_SEPARATION_M = 1.0


@dataclass(frozen=True)
class ChannelParams:
    """Link-budget and QoS parameters. Defaults follow the simulation setup
    used throughout the experiments (100 MHz, free-space exponent, 5 mm)."""

    bandwidth_hz: float = 100e6
    path_loss_exp: float = 2.0
    wavelength_m: float = 5e-3
    noise_psd_dbm_per_hz: float = -174.0
    p_min_mw: float = 0.0
    p_max_mw: float = 1000.0
    r_min_bps: float = 100e6

    def __post_init__(self):
        if not self.bandwidth_hz > 0:
            raise ValueError("bandwidth_hz must be positive")
        if not self.wavelength_m > 0:
            raise ValueError("wavelength_m must be positive")
        if self.path_loss_exp < 0:
            raise ValueError("path_loss_exp must be nonnegative")
        if not (0 <= self.p_min_mw <= self.p_max_mw) or not self.p_max_mw > 0:
            raise ValueError("need 0 <= p_min_mw <= p_max_mw and p_max_mw > 0")
        if self.r_min_bps < 0:
            raise ValueError("r_min_bps must be nonnegative")

    @property
    def noise_mw(self) -> float:
        """Noise power W * sigma^2 over the whole band, in mW."""
        return self.bandwidth_hz * 10.0 ** (self.noise_psd_dbm_per_hz / 10.0)


@dataclass(frozen=True)
class Placement:
    mbs_xy: np.ndarray
    user_xy: np.ndarray
    area_side_m: float = 100.0
    coverage_radius_m: float = math.inf

    def __post_init__(self):
        mbs = np.atleast_2d(np.asarray(self.mbs_xy, dtype=float))
        usr = np.atleast_2d(np.asarray(self.user_xy, dtype=float))
        object.__setattr__(self, "mbs_xy", mbs)
        object.__setattr__(self, "user_xy", usr)
        if mbs.shape[1] != 2 or usr.shape[1] != 2:
            raise ValueError("coordinates must be 2-D")
        if len(mbs) < 1 or len(usr) < 1:
            raise ValueError("need at least one mBS and one user")
        if not self.area_side_m > 0:
            raise ValueError("area_side_m must be positive")
        if not self.coverage_radius_m > 0:
            raise ValueError("coverage_radius_m must be positive")
        for pts in (mbs, usr):
            if np.any(pts < 0) or np.any(pts > self.area_side_m):
                raise ValueError("coordinates must lie inside the service area")

    @property
    def m(self) -> int:
        return len(self.mbs_xy)

    @property
    def n(self) -> int:
        return len(self.user_xy)

    def distances(self) -> np.ndarray:
        """User-to-mBS distance matrix, shape (n, m)."""
        diff = self.user_xy[:, None, :] - self.mbs_xy[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])


@dataclass(frozen=True)
class FadingModel:
    """Small-scale power gain h_ij.

    ``exponential_unit_mean`` draws |g|^2 for a unit-variance complex
    Gaussian g, i.e. Exp(1); ``deterministic_unit`` sets every gain to 1.
    """

    mode: str = "deterministic_unit"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("deterministic_unit", "exponential_unit_mean"):
            raise ValueError(f"unknown fading mode {self.mode!r}")

    def draw(self, n: int, m: int) -> np.ndarray:
        if self.mode == "deterministic_unit":
            return np.ones((n, m))
        rng = np.random.default_rng(self.seed)
        h = rng.exponential(1.0, size=(n, m))
        # Exp(1) can return exactly 0.0 with probability ~2^-53
        return np.maximum(h, np.finfo(float).tiny)


@dataclass(frozen=True)
class Scenario:
    params: ChannelParams
    placement: Placement
    gain_h: np.ndarray
    snr_coeff: np.ndarray
    in_coverage: np.ndarray
    distance: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.snr_coeff.shape[0]

    @property
    def m(self) -> int:
        return self.snr_coeff.shape[1]

    def to_dict(self) -> dict:
        pl = self.placement
        return {
            "params": {k: getattr(self.params, k) for k in self.params.__dataclass_fields__},
            "placement": {
                "mbs_xy": pl.mbs_xy.tolist(),
                "user_xy": pl.user_xy.tolist(),
                "area_side_m": pl.area_side_m,
                "coverage_radius_m": _encode_float(pl.coverage_radius_m),
            },
            "gain_h": self.gain_h.tolist(),
            "snr_coeff": self.snr_coeff.tolist(),
            "in_coverage": self.in_coverage.tolist(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        params = ChannelParams(**doc["params"])
        pl = doc["placement"]
        placement = Placement(
            np.array(pl["mbs_xy"], dtype=float),
            np.array(pl["user_xy"], dtype=float),
            pl["area_side_m"],
            _decode_float(pl["coverage_radius_m"]),
        )
        gain = np.array(doc["gain_h"], dtype=float)
        return _assemble(params, placement, gain)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


def _encode_float(v: float):
    return "inf" if math.isinf(v) else v


def _decode_float(v) -> float:
    return math.inf if v in ("inf", "Infinity") else float(v)


def _covered(dist: np.ndarray, radius: float) -> np.ndarray:
    return dist <= radius


def generate_placement(m, n, area_side_m=100.0, coverage_radius_m=math.inf,
                       mode="binomial_process", seed=0, mbs_xy=None,
                       user_xy=None, max_tries=1000) -> Placement:
    """Place ``m`` mBSs and ``n`` users in a square service area.

    In ``binomial_process`` mode users are i.i.d. uniform on the area,
    conditioned on lying within ``coverage_radius_m`` of some mBS and at
    least :data:`MIN_SEPARATION_M` from every mBS; each user is redrawn
    individually, and the whole user set is redrawn until every mBS covers
    at least one user. mBS positions are taken from ``mbs_xy`` if given,
    otherwise drawn uniformly from the same seeded stream.

    In ``fixed_list`` mode both coordinate lists are returned verbatim after
    validation.

    Raises
    ------
    InfeasibleGeometryError
        If ``max_tries`` draws (per user, and for the whole set) do not
        yield a valid placement, or if a fixed list violates coverage.
    """
    if m < 1 or n < 1:
        raise ValueError("need m >= 1 and n >= 1")
    if not area_side_m > 0:
        raise ValueError("area_side_m must be positive")

    if mode == "fixed_list":
        if mbs_xy is None or user_xy is None:
            raise ValueError("fixed_list mode needs mbs_xy and user_xy")
        pl = Placement(mbs_xy, user_xy, area_side_m, coverage_radius_m)
        if pl.m != m or pl.n != n:
            raise ValueError("coordinate list lengths do not match m, n")
        _check_geometry(pl)
        return pl
    if mode != "binomial_process":
        raise ValueError(f"unknown placement mode {mode!r}")

    rng = np.random.default_rng(seed)
    if mbs_xy is None:
        mbs = rng.uniform(0.0, area_side_m, size=(m, 2))
    else:
        mbs = np.asarray(mbs_xy, dtype=float)
        if mbs.shape != (m, 2):
            raise ValueError("mbs_xy must have shape (m, 2)")

    for _ in range(max_tries):
        users = np.empty((n, 2))
        for i in range(n):
            for _ in range(max_tries):
                pt = rng.uniform(0.0, area_side_m, size=2)
                d = np.hypot(*(mbs - pt).T)
                if d.min() >= MIN_SEPARATION_M and np.any(d <= coverage_radius_m):
                    users[i] = pt
                    break
            else:
                raise InfeasibleGeometryError(
                    f"user {i}: no covered location found in {max_tries} draws")
        pl = Placement(mbs, users, area_side_m, coverage_radius_m)
        if _covered(pl.distances(), coverage_radius_m).any(axis=0).all():
            return pl
    raise InfeasibleGeometryError(
        f"no placement with every mBS covering a user in {max_tries} draws")


def _check_geometry(pl: Placement) -> None:
    d = pl.distances()
    if d.min() < MIN_SEPARATION_M:
        raise InfeasibleGeometryError("a user is closer than the minimum separation")
    cov = _covered(d, pl.coverage_radius_m)
    if not cov.any(axis=1).all():
        raise InfeasibleGeometryError("a user is outside every mBS coverage")
    if not cov.any(axis=0).all():
        raise InfeasibleGeometryError("an mBS covers no user")


def build_scenario(params: ChannelParams, placement: Placement,
                   fading: FadingModel | None = None) -> Scenario:
    """Precompute the SNR coefficient matrix ``c`` with ``snr = c * p``.

    ``c_ij = d_ij^-alpha * h_ij * (lambda / 4 pi)^2 / (W sigma^2)`` for
    covered pairs and 0 elsewhere.
    """
    fading = fading or FadingModel()
    gain = fading.draw(placement.n, placement.m)
    return _assemble(params, placement, gain)


def _assemble(params, placement, gain) -> Scenario:
    dist = placement.distances()
    if dist.min() < MIN_SEPARATION_M:
        raise DomainError(
            f"distance {dist.min():.3g} m below minimum separation {MIN_SEPARATION_M} m")
    if gain.shape != dist.shape or np.any(gain <= 0) or not np.all(np.isfinite(gain)):
        raise DomainError("channel gains must be positive and finite with shape (n, m)")
    cov = _covered(dist, placement.coverage_radius_m)
    friis = (params.wavelength_m / (4.0 * math.pi)) ** 2
    coeff = dist ** (-params.path_loss_exp) * gain * friis / params.noise_mw
    if not np.all(np.isfinite(coeff)):
        raise DomainError("non-finite SNR coefficient")
    coeff = np.where(cov, coeff, 0.0)
    for arr in (gain, coeff, cov, dist):
        arr.setflags(write=False)
    return Scenario(params, placement, gain, coeff, cov, dist)


def link_rates(scn: Scenario, x, p) -> np.ndarray:
    """Per-link rates R_ij (bit/s) including the 1/sum_i x_ij sharing factor."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if x.shape != scn.snr_coeff.shape or p.shape != x.shape:
        raise ValueError("x and p must have shape (n, m)")
    if np.any(p < 0):
        raise DomainError("negative transmit power")
    if np.any(x < 0):
        raise DomainError("negative association value")
    if np.any((x > 0) & ~scn.in_coverage):
        raise DomainError("positive association outside coverage")
    load = x.sum(axis=0)
    se = np.log2(1.0 + scn.snr_coeff * p)
    safe = np.where(load > 0, load, 1.0)
    return scn.params.bandwidth_hz * x * se / safe


def user_rates(scn: Scenario, x, p) -> np.ndarray:
    """Total downlink rate of every user, shape (n,), in bit/s.

    Works for binary and relaxed ``x``; a user with an all-zero row gets
    exactly 0.
    """
    return link_rates(scn, x, p).sum(axis=1)
