"""Ensemble Kalman filter algebra and window cycling."""

import numpy as np
import pytest

from floodtwin import catchment as cm
from floodtwin import enkf, observe, swe
from floodtwin.errors import ConfigurationError, NumericalBlowupError
from floodtwin.rng import stream
from floodtwin.timebase import DAY, HOUR

SEED = 20260822


def member_rngs(n, salt="t"):
    return [stream(SEED, salt, i) for i in range(n)]


# ------------------------------------------------------------------ controls


def test_control_vector_round_trip():
    x = np.array([17.0, 45, 38, 38, 40, 40, 40, 1.1, 0.05, 0, 0, -0.1, 0])
    cv = enkf.ControlVector.from_vector(x)
    assert np.array_equal(cv.vector(), x)
    assert cv.a == 1.1


def test_control_vector_clips_on_build():
    x = np.zeros(enkf.N_CONTROLS)
    x[enkf.KS] = 300.0
    x[enkf.INFLOW] = 0.0
    cv = enkf.ControlVector.from_vector(x)
    assert np.all(cv.ks == 100.0)
    assert cv.a == 0.1


def test_control_vector_validation():
    with pytest.raises(ConfigurationError):
        enkf.ControlVector(ks=np.ones(6), a=1.0, delta_h=np.zeros(5))
    bad = np.zeros(enkf.N_CONTROLS)
    bad[3] = np.nan
    with pytest.raises(ConfigurationError):
        enkf.ControlVector.from_vector(bad)


def test_controls_to_parameters():
    x = np.concatenate([np.full(7, 33.0), [1.4], np.zeros(5)])
    params = enkf.controls_to_parameters(x)
    assert params.inflow_factor == 1.4
    assert np.all(params.ks == 33.0)


# ------------------------------------------------------------------ schedule


def test_schedule_cycle_count_six_day_event():
    sched = enkf.CycleSchedule(t0=0.0, t_end=6 * DAY)
    # floor((144 - 18) / 6) + 1 windows of 18 h shifted by 6 h
    assert sched.n_cycles == 22
    assert sched.cycle_start(1) == 0.0
    assert sched.cycle_window(1) == (0.0, 18 * HOUR)
    assert sched.cycle_start(22) == 126 * HOUR
    assert sched.checkpoint_time(1) == 6 * HOUR


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        enkf.CycleSchedule(t0=0.0, t_end=12 * HOUR)    # shorter than one window
    with pytest.raises(ConfigurationError):
        enkf.CycleSchedule(t0=0.0, t_end=6 * DAY, window=6 * HOUR, shift=12 * HOUR)
    sched = enkf.CycleSchedule(t0=0.0, t_end=6 * DAY)
    with pytest.raises(ConfigurationError):
        sched.cycle_start(0)
    with pytest.raises(ConfigurationError):
        sched.cycle_start(23)


# ------------------------------------------------------------------ forecast


def test_forecast_zero_sigma_copies_prior_mean():
    prior = enkf.default_prior(sigma=np.zeros(13))
    controls, sigma_used = enkf.forecast_controls(prior, None, member_rngs(6))
    assert np.all(sigma_used == 0.0)
    for i in range(6):
        np.testing.assert_array_equal(controls[:, i], prior.mean)


def test_forecast_blends_previous_spread():
    # std 0.5 with prior sigma 1.0 at lam 0.3: 0.3*0.5 + 0.7*1.0 = 0.85
    prior = enkf.default_prior(sigma=np.ones(13))
    prev = np.tile(prior.mean[:, None], (1, 2))
    prev[:, 0] += 0.5
    prev[:, 1] -= 0.5    # per-entry std is exactly 0.5
    controls, sigma_used = enkf.forecast_controls(prior, prev, member_rngs(2))
    assert np.allclose(sigma_used[enkf.KS], 0.85)
    assert np.allclose(sigma_used[enkf.INFLOW], 0.85)
    assert controls.shape == (13, 2)


def test_forecast_spread_never_sinks_below_floor():
    sigma_x = np.full(13, 2.0)
    prior = enkf.default_prior(sigma=sigma_x)
    prev = np.tile(prior.mean[:, None], (1, 8))    # collapsed: std exactly 0
    _, sigma_used = enkf.forecast_controls(prior, prev, member_rngs(8))
    lam = enkf.LAMBDA_SPREAD
    assert np.all(sigma_used[prior.active] >= (1.0 - lam) * sigma_x[prior.active])
    np.testing.assert_allclose(sigma_used[enkf.KS], (1.0 - lam) * 2.0)


def test_forecast_recen团ters_level_corrections_on_zero():
    prior = enkf.default_prior(sigma=np.full(13, 1.0e-9))
    prev = np.tile(prior.mean[:, None], (1, 4))
    prev[enkf.DELTA_H, :] = 0.4    # previous analysis drifted
    controls, _ = enkf.forecast_controls(prior, prev, member_rngs(4))
    assert np.abs(controls[enkf.DELTA_H]).max() < 1.0e-6


def test_forecast_pins_level_corrections_without_wsr():
    prior = enkf.default_prior()
    controls, sigma_used = enkf.forecast_controls(
        prior, None, member_rngs(8), has_wsr=False)
    assert np.all(controls[enkf.DELTA_H, :] == 0.0)
    assert np.all(sigma_used[enkf.DELTA_H] == 0.0)
    assert np.any(controls[enkf.KS, :] != prior.mean[enkf.KS, None])


def test_forecast_respects_activity_mask():
    active = np.zeros(13, dtype=bool)
    active[1] = True    # only the first riverbed segment varies
    prior = enkf.default_prior(active=active)
    controls, sigma_used = enkf.forecast_controls(prior, None, member_rngs(8))
    fixed = ~active
    np.testing.assert_array_equal(
        controls[fixed, :], np.tile(prior.mean[fixed, None], (1, 8)))
    assert np.all(sigma_used[fixed] == 0.0)
    assert controls[1].std() > 0.0


def test_forecast_clips_to_bounds():
    sigma = np.zeros(13)
    sigma[enkf.INFLOW] = 50.0    # absurd spread forces clipping
    prior = enkf.default_prior(sigma=sigma)
    controls, _ = enkf.forecast_controls(prior, None, member_rngs(16))
    a = controls[enkf.INFLOW]
    assert a.min() >= 0.1 and a.max() <= 3.0


def test_forecast_needs_two_members():
    with pytest.raises(ConfigurationError):
        enkf.forecast_controls(enkf.default_prior(), None, member_rngs(1))


# ------------------------------------------------------------- perturbed obs


def mk_gauge(value, t=3600.0, sigma=0.3):
    return observe.Observation("gauge", "gauge_mid", t, value, sigma)


def test_perturbed_obs_vanishing_sigma():
    obs = [mk_gauge(2.0, sigma=1.0e-12)]
    draws, clipped = enkf.perturb_observations(obs, member_rngs(6))
    assert clipped == 0
    np.testing.assert_allclose(draws, 2.0, atol=1e-10)


def test_perturbed_obs_mean_converges():
    obs = [mk_gauge(2.0, sigma=0.5)]
    draws, _ = enkf.perturb_observations(obs, member_rngs(10_000))
    # Monte-Carlo standard error of the mean is sigma/sqrt(N)
    assert abs(draws.mean() - 2.0) < 3.0 * 0.5 / np.sqrt(10_000)


def test_perturbed_wsr_values_stay_in_unit_interval():
    obs = [observe.Observation("wsr", 1, 3600.0, 0.98, 0.4)]
    draws, clipped = enkf.perturb_observations(obs, member_rngs(200))
    assert draws.max() <= 1.0
    assert draws.min() >= 0.0
    assert clipped > 0    # sigma 0.4 around 0.98 must overflow sometimes


def test_perturbed_obs_sigma_override():
    obs = [mk_gauge(2.0, sigma=0.3)]
    tight, _ = enkf.perturb_observations(obs, member_rngs(64), sigmas=[1e-12])
    np.testing.assert_allclose(tight, 2.0, atol=1e-10)
    with pytest.raises(ConfigurationError):
        enkf.perturb_observations(obs, member_rngs(4), sigmas=[0.0])


# ---------------------------------------------------------------- covariance


def test_covariances_hand_case():
    # anomalies x=(1,-1), y=(2,-2), two members:
    # P_xy = (1*2 + (-1)(-2))/2 = 2, P_yy = (4+4)/2 = 4
    x = np.array([[1.0, -1.0]])
    y = np.array([[2.0, -2.0]])
    p_xy, p_yy = enkf.covariances(x, y)
    assert p_xy[0, 0] == pytest.approx(2.0, rel=1e-14)
    assert p_yy[0, 0] == pytest.approx(4.0, rel=1e-14)


def test_covariances_zero_y():
    p_xy, p_yy = enkf.covariances(np.random.default_rng(3).normal(size=(4, 9)),
                                  np.zeros((2, 9)))
    assert np.all(p_xy == 0.0) and np.all(p_yy == 0.0)


def test_covariances_psd():
    rng = np.random.default_rng(5)
    y = rng.normal(size=(6, 40))
    _, p_yy = enkf.covariances(rng.normal(size=(3, 40)), y)
    eigenvalues = np.linalg.eigvalsh(p_yy)
    assert eigenvalues.min() >= -1e-12
    np.testing.assert_allclose(p_yy, p_yy.T, atol=1e-14)


def test_covariances_member_mismatch():
    with pytest.raises(ConfigurationError):
        enkf.covariances(np.zeros((3, 8)), np.zeros((2, 9)))


# ---------------------------------------------------------------------- gain


def test_gain_scalar_hand_case():
    # K = P_xy / (P_yy + R) = 2 / (4 + 1) = 0.4
    k = enkf.kalman_gain(np.array([[2.0]]), np.array([[4.0]]), np.array([1.0]))
    assert k[0, 0] == pytest.approx(0.4, rel=1e-14)


def test_gain_zero_cross_covariance():
    k = enkf.kalman_gain(np.zeros((3, 2)), np.eye(2), np.ones(2))
    assert np.all(k == 0.0)


def test_gain_large_r_limit():
    k = enkf.kalman_gain(np.array([[2.0]]), np.array([[4.0]]), np.array([1e12]))
    assert abs(k[0, 0]) < 1e-10


def test_gain_matches_generic_solver():
    rng = np.random.default_rng(9)
    y = rng.normal(size=(4, 60))
    x = rng.normal(size=(5, 60))
    p_xy, p_yy = enkf.covariances(x - x.mean(1, keepdims=True),
                                  y - y.mean(1, keepdims=True))
    r = rng.uniform(0.5, 2.0, size=4)
    k_chol = enkf.kalman_gain(p_xy, p_yy, r)
    k_direct = np.linalg.solve((p_yy + np.diag(r)).T, p_xy.T).T
    np.testing.assert_allclose(k_chol, k_direct, rtol=1e-10, atol=1e-12)


def test_gain_homogeneity_under_scaling():
    rng = np.random.default_rng(13)
    y = rng.normal(size=(3, 50))
    x = rng.normal(size=(5, 50))
    xa = x - x.mean(1, keepdims=True)
    ya = y - y.mean(1, keepdims=True)
    r = rng.uniform(0.5, 2.0, size=3)
    k1 = enkf.kalman_gain(*enkf.covariances(xa, ya), r)
    k2 = enkf.kalman_gain(*enkf.covariances(2 * xa, 2 * ya), 4.0 * r)
    np.testing.assert_allclose(k1, k2, rtol=1e-12)


def test_gain_rejects_unusable_covariance():
    with pytest.raises(NumericalBlowupError):
        enkf.kalman_gain(np.array([[1.0]]), np.array([[np.nan]]), np.array([1.0]))


# ------------------------------------------------------------------ analysis


def test_analysis_zero_innovation_is_identity():
    prior = enkf.default_prior()
    x_f = np.tile(prior.mean[:, None], (1, 4)) + 0.5
    x_f = enkf.clip_controls(x_f)
    y = np.full((2, 4), 1.25)
    gain = np.ones((13, 2))
    out = enkf.analysis_update(x_f, y, y, gain, prior)
    np.testing.assert_array_equal(out, x_f)


def test_analysis_zero_gain_is_identity():
    prior = enkf.default_prior()
    rng = np.random.default_rng(17)
    x_f = enkf.clip_controls(prior.mean[:, None] + rng.normal(size=(13, 5)))
    out = enkf.analysis_update(x_f, rng.normal(size=(3, 5)),
                               rng.normal(size=(3, 5)), np.zeros((13, 3)), prior)
    np.testing.assert_array_equal(out, x_f)


def test_analysis_keeps_inactive_entries():
    active = np.ones(13, dtype=bool)
    active[enkf.DELTA_H] = False
    prior = enkf.default_prior(active=active)
    x_f = np.tile(prior.mean[:, None], (1, 4))
    gain = np.ones((13, 1))
    y_o = np.full((1, 4), 2.0)
    y_f = np.full((1, 4), 1.0)
    out = enkf.analysis_update(x_f, y_o, y_f, gain, prior)
    np.testing.assert_array_equal(out[enkf.DELTA_H], x_f[enkf.DELTA_H])
    assert np.all(out[0] == x_f[0] + 1.0)


def test_analysis_clips_to_bounds():
    prior = enkf.default_prior()
    x_f = np.tile(prior.mean[:, None], (1, 3))
    gain = np.zeros((13, 1))
    gain[enkf.INFLOW] = 100.0
    out = enkf.analysis_update(x_f, np.full((1, 3), 5.0), np.zeros((1, 3)),
                               gain, prior)
    assert np.all(out[enkf.INFLOW] == 3.0)


def test_analysis_permutation_equivariance():
    prior = enkf.default_prior()
    rng = np.random.default_rng(23)
    n_e = 6
    x_f = enkf.clip_controls(prior.mean[:, None] + rng.normal(size=(13, n_e)))
    y_f = rng.normal(size=(2, n_e))
    y_o = rng.normal(size=(2, n_e))
    gain = rng.normal(size=(13, 2)) * 0.1
    base = enkf.analysis_update(x_f, y_o, y_f, gain, prior)
    perm = rng.permutation(n_e)
    shuffled = enkf.analysis_update(x_f[:, perm], y_o[:, perm], y_f[:, perm],
                                    gain, prior)
    np.testing.assert_allclose(shuffled, base[:, perm], rtol=1e-13)


def test_scalar_ensemble_filter_matches_exact_kalman():
    # prior N(2, 1), obs 2.5 with sigma 0.5, identity operator:
    # posterior variance (1 + 1/0.25)^-1 = 0.2, mean 0.2*(2 + 2.5/0.25) = 2.4
    n_e = 10_000
    rng = np.random.default_rng(SEED)
    x_f = 2.0 + rng.standard_normal(n_e)
    y_f = x_f.copy()
    obs = [mk_gauge(2.5, sigma=0.5)]
    y_o, _ = enkf.perturb_observations(obs, [stream(SEED, "kf", i)
                                             for i in range(n_e)])
    xa = x_f - x_f.mean()
    ya = y_f - y_f.mean()
    p_xy, p_yy = enkf.covariances(xa[None, :], ya[None, :])
    gain = enkf.kalman_gain(p_xy, p_yy, np.array([0.25]))
    x_a = x_f + (gain @ (y_o - y_f[None, :]))[0]
    se_mean = x_a.std() / np.sqrt(n_e)
    assert abs(x_a.mean() - 2.4) < 5.0 * se_mean
    se_var = x_a.var() * np.sqrt(2.0 / n_e)
    assert abs(x_a.var() - 0.2) < 5.0 * se_var
    # analysis squared innovation shrinks against the same observation
    assert np.mean((2.5 - x_a) ** 2) < np.mean((2.5 - x_f) ** 2)


# ------------------------------------------------------------------- cycling


@pytest.fixture(scope="module")
def small_setup():
    small = cm.generate_synthetic_catchment(
        {"nx": 40, "ny": 8, "dx": 50.0, "dy": 50.0, "base_flow": 60.0})
    t = np.array([-12 * HOUR, 2 * DAY])
    small = small.with_hydrograph(t, np.array([60.0, 60.0]))
    depth = np.where(small.grid.cell_kind == cm.CHANNEL, 1.0, 0.0)
    state = swe.still_state(small, depth_field=depth)
    schedule = enkf.CycleSchedule(t0=0.0, t_end=4 * HOUR, window=2 * HOUR,
                                  shift=1 * HOUR, spin_up=0.5 * HOUR)
    active = np.zeros(13, dtype=bool)
    active[1:7] = True
    active[enkf.INFLOW] = True
    sigma = np.zeros(13)
    sigma[1:7] = 3.0
    sigma[enkf.INFLOW] = 0.2
    sigma[enkf.DELTA_H] = 0.05
    prior = enkf.PriorSpec(
        mean=np.concatenate([cm.CALIBRATED_KS, [1.0], np.zeros(5)]),
        sigma=sigma, active=active)
    return small, state, schedule, prior


def window_obs(small, schedule, k):
    t_start, t_wend = schedule.cycle_window(k)
    z = small.grid.z_b
    s = small.station("gauge_mid")
    level = z[s.row, s.col] + 1.1
    sigma, _ = observe.gauge_sigma(level)
    return [observe.Observation("gauge", "gauge_mid", t_wend, level, sigma)]


def test_run_cycle_produces_next_ensemble(small_setup):
    small, state, schedule, prior = small_setup
    ens = enkf.initial_ensemble(state, 4)
    obs = window_obs(small, schedule, 1)
    nxt, diag, trajs = enkf.run_cycle(ens, small, prior, obs, schedule, SEED)
    assert nxt.k == 2
    assert nxt.n_members == 4
    assert nxt.controls.shape == (13, 4)
    for st in nxt.states:
        assert st.t == schedule.checkpoint_time(1)
    assert len(trajs) == 4
    assert diag.n_obs == 1 and not diag.has_wsr
    assert np.all(diag.sigma_used[enkf.DELTA_H] == 0.0)
    assert np.all(nxt.controls[enkf.DELTA_H] == 0.0)    # pinned without WSR
    # analysis moved the ensemble somewhere
    assert not np.allclose(diag.mean_a, diag.mean_f)


def test_run_cycle_without_observations_keeps_forecast(small_setup):
    small, state, schedule, prior = small_setup
    ens = enkf.initial_ensemble(state, 3)
    nxt, diag, trajs = enkf.run_cycle(ens, small, prior, [], schedule, SEED)
    np.testing.assert_array_equal(diag.mean_a, diag.mean_f)
    np.testing.assert_array_equal(diag.std_a, diag.std_f)
    assert diag.n_obs == 0
    assert len(trajs) == 3


def test_run_cycle_is_deterministic(small_setup):
    small, state, schedule, prior = small_setup
    obs = window_obs(small, schedule, 1)
    runs = []
    for _ in range(2):
        ens = enkf.initial_ensemble(state, 3)
        nxt, diag, _ = enkf.run_cycle(ens, small, prior, obs, schedule, SEED)
        runs.append((nxt.controls.copy(), diag.mean_a.copy()))
    np.testing.assert_array_equal(runs[0][0], runs[1][0])
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


def test_run_cycle_thread_count_invariant(small_setup):
    small, state, schedule, prior = small_setup
    obs = window_obs(small, schedule, 1)
    ens1 = enkf.initial_ensemble(state, 3)
    one, d1, t1 = enkf.run_cycle(ens1, small, prior, obs, schedule, SEED,
                                 threads=1)
    ens2 = enkf.initial_ensemble(state, 3)
    two, d2, t2 = enkf.run_cycle(ens2, small, prior, obs, schedule, SEED,
                                 threads=2)
    np.testing.assert_array_equal(one.controls, two.controls)
    for a, b in zip(one.states, two.states):
        assert np.array_equal(a.h, b.h)
        assert np.array_equal(a.u, b.u)
    for ta, tb in zip(t1, t2):
        assert np.array_equal(ta.station_levels, tb.station_levels)


def test_run_cycle_rejects_stray_observations(small_setup):
    small, state, schedule, prior = small_setup
    ens = enkf.initial_ensemble(state, 3)
    stray = [mk_gauge(2.0, t=schedule.cycle_window(1)[1] + 1.0)]
    with pytest.raises(ConfigurationError):
        enkf.run_cycle(ens, small, prior, stray, schedule, SEED)


def test_run_cycle_reports_failed_member(small_setup):
    small, state, schedule, prior = small_setup
    broken = state.copy()
    broken.h[broken.h > 0] = np.nan
    ens = enkf.Ensemble(states=(state.copy(), broken, state.copy()),
                        controls=None, k=1)
    with pytest.raises(NumericalBlowupError) as err:
        enkf.run_cycle(ens, small, prior, [], schedule, SEED)
    assert err.value.member == 1


def test_chained_cycles_advance_schedule(small_setup):
    small, state, schedule, prior = small_setup
    ens = enkf.initial_ensemble(state, 3)
    diags = []
    for k in range(1, schedule.n_cycles + 1):
        obs = window_obs(small, schedule, k)
        ens, diag, _ = enkf.run_cycle(ens, small, prior, obs, schedule, SEED)
        diags.append(diag)
    assert [d.k for d in diags] == [1, 2, 3]
    assert ens.k == schedule.n_cycles + 1
    # later forecasts recentre on the previous analysis
    assert diags[1].sigma_used[1] >= (1 - enkf.LAMBDA_SPREAD) * prior.sigma[1]


def test_diagnostics_csv_layout(small_setup, tmp_path):
    small, state, schedule, prior = small_setup
    ens = enkf.initial_ensemble(state, 3)
    _, diag, _ = enkf.run_cycle(ens, small, prior, [], schedule, SEED)
    path = tmp_path / "diag.csv"
    enkf.write_diagnostics_csv(path, [diag])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "cycle,entry,mean_f,std_f,mean_a,std_a"
    assert len(lines) == 1 + 13
    assert lines[1].startswith("1,ks_floodplain,")


def test_initial_ensemble_members_independent(small_setup):
    _, state, _, _ = small_setup
    ens = enkf.initial_ensemble(state, 3)
    ens.states[0].h[0, 0] = 99.0
    assert ens.states[1].h[0, 0] != 99.0
    with pytest.raises(ConfigurationError):
        enkf.initial_ensemble(state, 1)
