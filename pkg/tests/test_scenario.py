import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fixed_scn, make_scn
from helpers import snr_coeff
from mcuapa.errors import DomainError, InfeasibleGeometryError
from mcuapa.scenario import (MIN_SEPARATION_M, ChannelParams, FadingModel, Placement,
                             Scenario, build_scenario, generate_placement, link_rates,
                             user_rates)


def test_default_channel_parameters():
    prm = ChannelParams()
    assert prm.bandwidth_hz == 100e6
    assert prm.path_loss_exp == 2.0
    assert prm.wavelength_m == 5e-3
    assert prm.noise_psd_dbm_per_hz == -174.0
    assert (prm.p_min_mw, prm.p_max_mw) == (0.0, 1000.0)
    assert prm.r_min_bps == 100e6


def test_noise_power_over_band():
    # -174 dBm/Hz over 100 MHz is -94 dBm
    assert ChannelParams().noise_mw == pytest.approx(10 ** (-9.4), rel=1e-12)


def test_snr_coefficient_at_ten_metres():
    scn = fixed_scn([[0, 0]], [[10, 0]])
    assert scn.snr_coeff[0, 0] == pytest.approx(snr_coeff(10.0), rel=1e-12)
    assert scn.snr_coeff[0, 0] == pytest.approx(3.977, rel=1e-3)


def test_single_link_rate_at_full_power():
    scn = fixed_scn([[0, 0]], [[10, 0]])
    r = user_rates(scn, [[1.0]], [[1000.0]])[0]
    expect = 100e6 * math.log2(1 + 1000 * snr_coeff(10.0))
    assert r == pytest.approx(expect, rel=1e-12)
    assert r == pytest.approx(1.1958e9, rel=1e-4)


def test_link_sharing_divides_by_column_load():
    scn = fixed_scn([[0, 0]], [[10, 0], [0, 10]])
    x = np.ones((2, 1))
    p = np.full((2, 1), 500.0)
    r = link_rates(scn, x, p)
    se = math.log2(1 + 500 * snr_coeff(10.0))
    assert r[0, 0] == pytest.approx(100e6 * se / 2, rel=1e-12)


def test_zero_row_has_zero_rate():
    scn = fixed_scn([[0, 0], [50, 50]], [[10, 0], [50, 40]])
    x = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert user_rates(scn, x, np.full((2, 2), 100.0))[1] == 0.0


def test_rates_reject_bad_inputs():
    scn = fixed_scn([[0, 0]], [[10, 0]])
    with pytest.raises(DomainError):
        user_rates(scn, [[1.0]], [[-1.0]])
    with pytest.raises(ValueError):
        user_rates(scn, np.ones((2, 1)), np.ones((2, 1)))


def test_coverage_masks_coefficients():
    scn = fixed_scn([[0, 0], [90, 90]], [[10, 0], [85, 90]], radius=20)
    assert scn.in_coverage.tolist() == [[True, False], [False, True]]
    assert scn.snr_coeff[0, 1] == 0.0
    with pytest.raises(DomainError):
        link_rates(scn, np.array([[1.0, 1.0], [0, 1.0]]), np.full((2, 2), 1.0))


def test_placement_is_deterministic_per_seed():
    a = generate_placement(5, 10, seed=7)
    b = generate_placement(5, 10, seed=7)
    c = generate_placement(5, 10, seed=8)
    assert np.array_equal(a.user_xy, b.user_xy) and np.array_equal(a.mbs_xy, b.mbs_xy)
    assert not np.array_equal(a.user_xy, c.user_xy)


@given(st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**31 - 1),
       st.sampled_from([15.0, 30.0, math.inf]))
def test_placement_invariants(m, n, seed, radius):
    mbs = np.random.default_rng(1).uniform(0, 100, (m, 2))
    try:
        pl = generate_placement(m, n, coverage_radius_m=radius, seed=seed, mbs_xy=mbs)
    except InfeasibleGeometryError:
        return
    d = pl.distances()
    assert d.min() >= MIN_SEPARATION_M
    assert np.all((pl.user_xy >= 0) & (pl.user_xy <= 100))
    cov = d <= radius
    assert cov.any(axis=1).all() and cov.any(axis=0).all()


def test_impossible_coverage_raises():
    with pytest.raises(InfeasibleGeometryError):
        generate_placement(2, 3, coverage_radius_m=0.5, seed=0, max_tries=20)


def test_fixed_list_validation():
    with pytest.raises(InfeasibleGeometryError):
        generate_placement(1, 1, mode="fixed_list", mbs_xy=[[0, 0]], user_xy=[[0.5, 0]])
    with pytest.raises(ValueError):
        generate_placement(1, 1, mode="fixed_list", mbs_xy=[[0, 0]], user_xy=[[120, 0]])
    with pytest.raises(ValueError):
        generate_placement(1, 1, mode="nope")


def test_fading_modes():
    assert np.all(FadingModel().draw(3, 2) == 1.0)
    h1 = FadingModel("exponential_unit_mean", 3).draw(200, 50)
    h2 = FadingModel("exponential_unit_mean", 3).draw(200, 50)
    assert np.array_equal(h1, h2) and np.all(h1 > 0)
    # Exp(1): mean 1, variance 1
    assert h1.mean() == pytest.approx(1.0, abs=0.03)
    assert h1.var() == pytest.approx(1.0, abs=0.08)
    with pytest.raises(ValueError):
        FadingModel("rayleigh")


def test_scenario_json_round_trip():
    scn = make_scn(3, 6, seed=5, radius=40.0)
    back = Scenario.from_json(scn.to_json())
    assert np.array_equal(back.snr_coeff, scn.snr_coeff)
    assert np.array_equal(back.in_coverage, scn.in_coverage)
    inf = make_scn(2, 3, seed=1)
    assert Scenario.from_json(inf.to_json()).placement.coverage_radius_m == math.inf


def test_scenario_arrays_are_read_only():
    scn = make_scn(2, 3)
    with pytest.raises(ValueError):
        scn.snr_coeff[0, 0] = 1.0


def test_placement_validation():
    with pytest.raises(ValueError):
        Placement([[0, 0, 0]], [[1, 1]])
    with pytest.raises(ValueError):
        Placement([[0, 0]], [[1, 1]], coverage_radius_m=0)
    with pytest.raises(ValueError):
        ChannelParams(p_min_mw=10, p_max_mw=5)


@given(st.integers(0, 10**6), st.permutations(range(4)))
def test_rates_equivariant_under_relabeling(seed, perm):
    rng = np.random.default_rng(seed)
    scn = make_scn(4, 5, seed=seed % 1000)
    x = (rng.random((5, 4)) < 0.5).astype(float)
    p = rng.uniform(0, 1000, (5, 4))
    perm = np.array(perm)
    pl = scn.placement
    scn2 = build_scenario(scn.params, Placement(pl.mbs_xy[perm], pl.user_xy))
    scn1 = build_scenario(scn.params, pl)
    r1 = user_rates(scn1, x, p)
    r2 = user_rates(scn2, x[:, perm], p[:, perm])
    assert np.allclose(r1, r2, rtol=1e-12)
    assert np.all(r1 >= 0)
