import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from cellfree.scenario import (ConfigError, ScenarioConfig, ScenarioStats, assign_pilots,
                               drop_network, gaussian_scattering_covariance, pathloss,
                               repair_psd, select_clusters, steering_vector)


# --- config ----------------------------------------------------------------

def test_config_derived_quantities():
    cfg = ScenarioConfig()
    assert cfg.M == 200
    assert cfg.P_s == 50 * 0.2
    # -174 dBm/Hz + 10 log10(5 MHz) + 9 dB = -97.99 dBm
    assert cfg.noise_variance == pytest.approx(10 ** ((-174 + 10 * math.log10(5e6) + 9 - 30) / 10))
    assert cfg.overhead == pytest.approx(0.975)


@pytest.mark.parametrize("bad", [dict(L=0), dict(K=0), dict(cluster_size=11, L=10),
                                 dict(tau_p=0), dict(tau_p=300), dict(p_a=0.0),
                                 dict(angular_spread_deg=0.0), dict(pilot_scheme="greedy"),
                                 dict(covariance_model="other")])
def test_config_rejects_invalid(bad):
    with pytest.raises(ConfigError):
        ScenarioConfig(**bad)


def test_config_dict_roundtrip_and_unknown_keys():
    cfg = ScenarioConfig(K=7, seed=3)
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"antennas": 4})


# --- pathloss --------------------------------------------------------------

def _cost_hata_db(d_m):
    # independent evaluation of the three-slope model, distances in km
    L = 46.3 + 33.9 * math.log10(1900) - 13.82 * math.log10(15) \
        - (1.1 * math.log10(1900) - 0.7) * 1.65 + (1.56 * math.log10(1900) - 0.8)
    d = max(d_m, 1.0) / 1000
    if d > 0.05:
        return -L - 35 * math.log10(d)
    if d > 0.01:
        return -L - 10 * math.log10(0.05 ** 1.5 * d ** 2)
    return -L - 10 * math.log10(0.05 ** 1.5 * 0.01 ** 2)


@pytest.mark.parametrize("d", [0.0, 0.5, 5.0, 10.0, 20.0, 49.0, 51.0, 300.0, 1000.0, 1800.0])
def test_pathloss_matches_three_slope_formula(d):
    cfg = ScenarioConfig()
    assert 10 * np.log10(pathloss(d, cfg)) == pytest.approx(_cost_hata_db(d), abs=1e-9)


def test_pathloss_floor_and_far_slope():
    cfg = ScenarioConfig()
    assert pathloss(3.0, cfg) == pathloss(9.9, cfg)
    ratio_db = 10 * np.log10(pathloss(100.0, cfg) / pathloss(1000.0, cfg))
    assert ratio_db == pytest.approx(35.0, abs=1e-9)


@given(st.floats(0, 5000), st.floats(0, 5000))
def test_pathloss_monotone(d1, d2):
    cfg = ScenarioConfig()
    lo, hi = sorted((d1, d2))
    assert pathloss(hi, cfg) <= pathloss(lo, cfg)


def test_shadowing_only_beyond_breakpoint(rng):
    cfg = ScenarioConfig()
    d = np.array([5.0, 30.0, 200.0, 200.0])
    g = pathloss(d, cfg, rng)
    assert g[0] == pathloss(5.0, cfg) and g[1] == pathloss(30.0, cfg)
    z = 10 * np.log10(pathloss(np.full(20000, 200.0), cfg, rng) / pathloss(200.0, cfg))
    assert abs(z.mean()) < 4 * 8 / np.sqrt(z.size)
    assert z.std() == pytest.approx(8.0, rel=0.03)


# --- steering vector and covariance ----------------------------------------

def test_steering_examples():
    np.testing.assert_allclose(steering_vector(0.0, 4), np.ones(4))
    np.testing.assert_allclose(steering_vector(np.pi / 2, 2), [1, -1], atol=1e-15)


@given(st.floats(-10, 10), st.integers(1, 16))
def test_steering_unit_modulus(angle, n):
    a = steering_vector(angle, n)
    np.testing.assert_allclose(np.abs(a), 1.0, rtol=1e-12)
    assert np.vdot(a, a).real == pytest.approx(n)


def test_covariance_scalar_case():
    R = gaussian_scattering_covariance(2.5e-9, 0.3, 10.0, 1)
    np.testing.assert_allclose(R, [[2.5e-9]])


def test_covariance_small_spread_is_rank_one():
    a = steering_vector(0.4, 4)
    for exact in (True, False):
        R = gaussian_scattering_covariance(1.0, 0.4, 1e-4, 4, exact=exact)
        np.testing.assert_allclose(R, np.outer(a, a.conj()), atol=1e-6)


def _quad_covariance(angle, spread_deg, n):
    s = np.deg2rad(spread_deg)
    pdf = lambda x: np.exp(-x**2 / (2 * s**2)) / (np.sqrt(2 * np.pi) * s)
    R = np.zeros((n, n), dtype=complex)
    for m in range(n):
        for k in range(n):
            re = integrate.quad(lambda x: np.cos(np.pi * (m - k) * np.sin(angle + x)) * pdf(x),
                                -20 * s, 20 * s, limit=200)[0]
            im = integrate.quad(lambda x: np.sin(np.pi * (m - k) * np.sin(angle + x)) * pdf(x),
                                -20 * s, 20 * s, limit=200)[0]
            R[m, k] = re + 1j * im
    return R


@pytest.mark.parametrize("angle", [0.0, 0.6, -1.2])
def test_covariance_matches_quadrature(angle):
    R = gaussian_scattering_covariance(1.0, angle, 10.0, 4)
    ref = _quad_covariance(angle, 10.0, 4)
    assert np.max(np.abs(R - ref)) < 1e-3
    # off-diagonal magnitude decays with the antenna separation
    mags = [abs(R[0, j]) for j in range(4)]
    if angle == 0.0:
        assert mags == sorted(mags, reverse=True)


def test_exact_model_beats_closed_form():
    # the small-angle expansion drifts away from the integral at 10 degrees, hence not the default
    for angle in (0.0, 0.6, -1.2):
        ref = _quad_covariance(angle, 10.0, 4)
        exact = gaussian_scattering_covariance(1.0, angle, 10.0, 4)
        approx = gaussian_scattering_covariance(1.0, angle, 10.0, 4, exact=False)
        assert np.max(np.abs(exact - ref)) < np.max(np.abs(approx - ref))
        assert np.max(np.abs(approx - ref)) < 0.1


@settings(max_examples=50, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(0.5, 40), st.integers(1, 8), st.booleans())
def test_covariance_hermitian_psd_trace(angle, spread, n, exact):
    beta = 3.7e-10
    R = gaussian_scattering_covariance(beta, angle, spread, n, exact=exact)
    assert np.linalg.norm(R - R.conj().T) < 1e-12 * np.linalg.norm(R)
    assert np.linalg.eigvalsh(R).min() >= -1e-10 * np.trace(R).real
    assert np.trace(R).real == pytest.approx(n * beta, rel=1e-9)


def test_repair_psd_rejects_indefinite():
    with pytest.raises(ValueError):
        repair_psd(np.diag([1.0, -0.5]))
    fixed = repair_psd(np.diag([1.0, -1e-14]).astype(complex))
    assert np.linalg.eigvalsh(fixed).min() >= 0


# --- pilots and clusters -----------------------------------------------------

def test_round_robin_pilots():
    p = assign_pilots(10, 5)
    assert np.all(np.bincount(p) == 2)
    assert np.all(assign_pilots(4, 5) == np.arange(4))
    assert np.all(assign_pilots(6, 1) == 0)


def test_random_pilots_balanced(rng):
    p = assign_pilots(10, 5, rng, "random")
    assert np.all(np.bincount(p, minlength=5) == 2)
    with pytest.raises(ValueError):
        assign_pilots(10, 5, None, "random")


def test_select_clusters_picks_largest():
    metric = np.array([[1.0, 5.0, 3.0, 2.0]])
    assert select_clusters(metric, 2).tolist() == [[False, True, True, False]]
    assert select_clusters(metric, 2, largest=False).tolist() == [[True, False, False, True]]


# --- drop_network -------------------------------------------------------------

def test_drop_default_config(default_stats):
    s = default_stats
    assert s.serving.shape == (10, 50)
    assert np.all(s.serving.sum(axis=1) == 10)
    assert np.all(np.linalg.norm(s.ap_pos, axis=1) <= 1000) and np.all(np.linalg.norm(s.ue_pos, axis=1) <= 1000)
    # beta ordering: every serving AP is at least as strong as every non-serving AP
    for k in range(s.K):
        assert s.beta[k, s.serving[k]].min() >= s.beta[k, ~s.serving[k]].max()
    # cluster symmetry
    for l, users in enumerate(s.served_users):
        assert users == [k for k in range(s.K) if l in s.serving_sets[k]]
    # pilot-sharing relation
    for k in range(s.K):
        for i in range(s.K):
            assert (i in s.copilot_sets[k]) == (s.pilot_of[i] == s.pilot_of[k]) == (k in s.copilot_sets[i])
    tr = np.trace(s.R, axis1=-2, axis2=-1).real
    np.testing.assert_allclose(tr, s.N * s.beta, rtol=1e-9)
    np.testing.assert_allclose(s.Q, s.R / (1 + s.kappa)[..., None, None])
    assert np.all(s.kappa >= 0)


def test_kappa_distribution_in_db():
    s = drop_network(ScenarioConfig(L=200, K=50, cluster_size=5), np.random.default_rng(3))
    kdb = 10 * np.log10(s.kappa).ravel()
    assert abs(kdb.mean() - 8) < 4 * 4 / np.sqrt(kdb.size)
    assert kdb.std() == pytest.approx(4, rel=0.03)


def test_drop_single_pair():
    s = drop_network(ScenarioConfig(L=1, K=1, cluster_size=1), np.random.default_rng(0))
    assert s.serving_sets == [[0]] and s.served_users == [[0]]


def test_drop_deterministic_and_serializable(tmp_path, small_cfg):
    a = drop_network(small_cfg, np.random.default_rng(5))
    b = drop_network(small_cfg, np.random.default_rng(5))
    assert a.dumps() == b.dumps()
    a.save(tmp_path / "s.json")
    c = ScenarioStats.load(tmp_path / "s.json")
    assert c.dumps() == a.dumps()
    np.testing.assert_array_equal(c.R, a.R)
    assert c.cfg == a.cfg


def test_distance_cluster_metric():
    cfg = ScenarioConfig(L=20, K=5, cluster_size=4, cluster_metric="distance")
    s = drop_network(cfg, np.random.default_rng(2))
    dist = np.linalg.norm(s.ue_pos[:, None] - s.ap_pos[None], axis=-1)
    for k in range(s.K):
        assert dist[k, s.serving[k]].max() <= dist[k, ~s.serving[k]].min()
