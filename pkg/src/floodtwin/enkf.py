"""Cycled stochastic ensemble Kalman filter over sliding windows.

The control vector has 13 entries: seven Strickler coefficients (entry 0
is the floodplain, 1..6 the riverbed segments), one inflow multiplier,
and five floodplain level corrections. Controls are plain float arrays;
the index constants below name the blocks.

Each cycle: draw forecast controls about the previous analysis, spin up
and propagate every member across the window, correct the controls with
perturbed observations, then re-propagate with the analyzed controls to
produce the restart states for the next cycle.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import observe, swe
from .catchment import CALIBRATED_KS
from .errors import ConfigurationError, NumericalBlowupError
from .rng import stream
from .timebase import HOUR

N_CONTROLS = 13
KS = slice(0, 7)
INFLOW = 7
DELTA_H = slice(8, 13)

ENTRY_NAMES = (
    "ks_floodplain", "ks_seg1", "ks_seg2", "ks_seg3", "ks_seg4",
    "ks_seg5", "ks_seg6", "inflow_factor",
    "dh_zone1", "dh_zone2", "dh_zone3", "dh_zone4", "dh_zone5",
)

LAMBDA_SPREAD = 0.3

_CLIP_LO = np.array([5.0] * 7 + [0.1] + [-np.inf] * 5)
_CLIP_HI = np.array([100.0] * 7 + [3.0] + [np.inf] * 5)


def clip_controls(x):
    """Clip Strickler values to [5, 100] and the inflow factor to [0.1, 3].

    Accepts one vector (13,) or a member matrix (13, N_e).
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = (_CLIP_LO, _CLIP_HI) if x.ndim == 1 else \
        (_CLIP_LO[:, None], _CLIP_HI[:, None])
    return np.clip(x, lo, hi)


def controls_to_parameters(x):
    return swe.EffectiveParameters(ks=np.array(x[KS], dtype=np.float64),
                                   inflow_factor=float(x[INFLOW]))


@dataclass(frozen=True)
class ControlVector:
    """Named view of one member's 13 control values (clipped on build)."""

    ks: np.ndarray
    a: float
    delta_h: np.ndarray

    def __post_init__(self):
        if np.shape(self.ks) != (7,) or np.shape(self.delta_h) != (5,):
            raise ConfigurationError("control vector wants 7 ks and 5 delta_h values")
        vec = self.vector()
        if not np.all(np.isfinite(vec)):
            raise ConfigurationError("control values must be finite")
        clipped = clip_controls(vec)
        object.__setattr__(self, "ks", clipped[KS])
        object.__setattr__(self, "a", float(clipped[INFLOW]))
        object.__setattr__(self, "delta_h", clipped[DELTA_H])

    def vector(self):
        return np.concatenate([np.asarray(self.ks, dtype=np.float64),
                               [self.a],
                               np.asarray(self.delta_h, dtype=np.float64)])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (N_CONTROLS,):
            raise ConfigurationError(f"control vector needs {N_CONTROLS} entries")
        return cls(ks=x[KS].copy(), a=float(x[INFLOW]), delta_h=x[DELTA_H].copy())


@dataclass(frozen=True)
class PriorSpec:
    """First-cycle control distribution and the activity mask."""

    mean: np.ndarray      # (13,)
    sigma: np.ndarray     # (13,) standard deviations, >= 0
    active: np.ndarray    # (13,) bool; inactive entries stay at the mean

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        active = np.asarray(self.active, dtype=bool)
        if mean.shape != (N_CONTROLS,) or sigma.shape != (N_CONTROLS,) \
                or active.shape != (N_CONTROLS,):
            raise ConfigurationError(f"prior arrays must have {N_CONTROLS} entries")
        if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
            raise ConfigurationError("prior sigma must be finite and >= 0")
        if not np.all(np.isfinite(mean)):
            raise ConfigurationError("prior mean must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "active", active)


DEFAULT_PRIOR_SIGMA = np.array(
    [3.0] + [5.0] * 6 + [0.25] + [0.1] * 5)


def default_prior(active=None, sigma=None):
    """Prior centered on the calibrated controls: K_s calibrated, a=1, dH=0."""
    mean = np.concatenate([CALIBRATED_KS, [1.0], np.zeros(5)])
    sigma = DEFAULT_PRIOR_SIGMA.copy() if sigma is None else np.asarray(sigma, float)
    if active is None:
        active = np.ones(N_CONTROLS, dtype=bool)
    return PriorSpec(mean=mean, sigma=sigma, active=np.asarray(active, dtype=bool))


@dataclass(frozen=True)
class CycleSchedule:
    """Sliding assimilation windows over the event span."""

    t0: float
    t_end: float
    window: float = 18.0 * HOUR
    shift: float = 6.0 * HOUR
    spin_up: float = 3.0 * HOUR

    def __post_init__(self):
        if self.shift <= 0 or self.window <= 0 or self.spin_up < 0:
            raise ConfigurationError("schedule durations must be positive")
        if self.shift > self.window:
            raise ConfigurationError("window shift cannot exceed the window length")
        if self.t0 + self.window > self.t_end:
            raise ConfigurationError("event span too short for one assimilation window")

    @property
    def n_cycles(self):
        return int((self.t_end - self.t0 - self.window) // self.shift) + 1

    def cycle_start(self, k):
        if not 1 <= k <= self.n_cycles:
            raise ConfigurationError(f"cycle {k} outside 1..{self.n_cycles}")
        return self.t0 + (k - 1) * self.shift

    def cycle_window(self, k):
        start = self.cycle_start(k)
        return start, start + self.window

    def checkpoint_time(self, k):
        """Where the analysis run saves the next cycle's restart state."""
        return self.cycle_start(k) + self.shift


@dataclass(frozen=True)
class Ensemble:
    """Member restart states and controls entering cycle ``k``."""

    states: tuple          # N_e HydraulicState at the window start
    controls: object       # (13, N_e) array, or None before the first cycle
    k: int

    def __post_init__(self):
        if len(self.states) < 2:
            raise ConfigurationError("ensemble needs at least 2 members")
        if self.controls is not None and \
                np.shape(self.controls) != (N_CONTROLS, len(self.states)):
            raise ConfigurationError("controls shape must be (13, N_e)")

    @property
    def n_members(self):
        return len(self.states)


def initial_ensemble(state, n_members):
    """Cycle-1 ensemble: every member starts from the same state."""
    return Ensemble(states=tuple(state.copy() for _ in range(n_members)),
                    controls=None, k=1)


@dataclass(frozen=True)
class CycleDiagnostics:
    k: int
    t_start: float
    t_window_end: float
    n_obs: int
    has_wsr: bool
    sigma_used: np.ndarray    # (13,) dispersion actually applied this cycle
    mean_f: np.ndarray
    std_f: np.ndarray
    mean_a: np.ndarray
    std_a: np.ndarray
    obs_clip_count: int


# ------------------------------------------------------------ filter algebra


def forecast_controls(prior, prev_controls, member_rngs, lam=LAMBDA_SPREAD,
                      has_wsr=True):
    """Members for the next forecast, drawn about the previous analysis.

    Cycle 1 (prev_controls None) draws about the prior mean with the prior
    sigma. Later cycles recenter on the previous analysis mean and blend
    its spread with the prior: sigma = lam*std_prev + (1-lam)*sigma_prior,
    so dispersion never falls below (1-lam)*sigma_prior. Level-correction
    entries always recenter on zero, and are pinned to zero entirely when
    the window holds no WSR observation.

    Returns (controls (13, N_e), sigma_used (13,)).
    """
    n_members = len(member_rngs)
    if n_members < 2:
        raise ConfigurationError("ensemble needs at least 2 members")
    if not 0.0 <= lam < 1.0:
        raise ConfigurationError("spread weight lam must be in [0, 1)")

    center = prior.mean.copy()
    if prev_controls is None:
        sigma = prior.sigma.copy()
    else:
        prev = np.asarray(prev_controls, dtype=np.float64)
        if prev.shape != (N_CONTROLS, n_members):
            raise ConfigurationError("previous analysis has a different member count")
        center = prev.mean(axis=1)
        sigma = lam * prev.std(axis=1) + (1.0 - lam) * prior.sigma
    # level corrections carry no mean between cycles
    center[DELTA_H] = 0.0
    sigma[~prior.active] = 0.0
    center[~prior.active] = prior.mean[~prior.active]
    if not has_wsr:
        sigma[DELTA_H] = 0.0

    out = np.empty((N_CONTROLS, n_members))
    for i, rng in enumerate(member_rngs):
        theta = rng.standard_normal(N_CONTROLS) * sigma
        out[:, i] = clip_controls(center + theta)
    out[~prior.active, :] = prior.mean[~prior.active, None]
    return out, sigma


def perturb_observations(observations, member_rngs, sigmas=None):
    """Per-member observation draws y + eps, eps ~ N(0, sigma^2).

    WSR draws are clipped back into [0, 1]. Returns (matrix (N_obs, N_e),
    clip_count).
    """
    n_obs = len(observations)
    values = np.array([o.value for o in observations], dtype=np.float64)
    if sigmas is None:
        sigmas = np.array([o.sigma for o in observations], dtype=np.float64)
    else:
        sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(sigmas <= 0):
        raise ConfigurationError("observation sigmas must be > 0")
    is_wsr = np.array([o.kind == observe.WSR for o in observations], dtype=bool)

    out = np.empty((n_obs, len(member_rngs)))
    clipped = 0
    for i, rng in enumerate(member_rngs):
        draw = values + rng.standard_normal(n_obs) * sigmas
        bad = is_wsr & ((draw < 0.0) | (draw > 1.0))
        clipped += int(np.count_nonzero(bad))
        draw[is_wsr] = np.clip(draw[is_wsr], 0.0, 1.0)
        out[:, i] = draw
    return out, clipped


def covariances(x_anoms, y_anoms):
    """Ensemble covariance blocks P_xy = X Y^T / N_e and P_yy = Y Y^T / N_e."""
    x_anoms = np.asarray(x_anoms, dtype=np.float64)
    y_anoms = np.asarray(y_anoms, dtype=np.float64)
    if x_anoms.ndim != 2 or y_anoms.ndim != 2 \
            or x_anoms.shape[1] != y_anoms.shape[1]:
        raise ConfigurationError("anomaly matrices must share the member axis")
    n_e = x_anoms.shape[1]
    p_xy = x_anoms @ y_anoms.T / n_e
    p_yy = y_anoms @ y_anoms.T / n_e
    return p_xy, p_yy


def kalman_gain(p_xy, p_yy, r_diag):
    """K = P_xy [P_yy + R]^(-1) through a Cholesky solve, never an inverse."""
    r_diag = np.asarray(r_diag, dtype=np.float64)
    innov_cov = p_yy + np.diag(r_diag)
    try:
        factor = cho_factor(innov_cov, lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalBlowupError(
            f"innovation covariance not positive definite: {exc}") from exc
    # K (P_yy + R) = P_xy, transposed into a standard left-solve
    return cho_solve(factor, p_xy.T).T


def analysis_update(controls_f, y_perturbed, y_forecast, gain, prior):
    """x_a = x_f + K (y_o - y_f) per member, clipped, inactive entries kept."""
    innovations = y_perturbed - y_forecast
    out = clip_controls(controls_f + gain @ innovations)
    out[~prior.active, :] = controls_f[~prior.active, :]
    return out


# ------------------------------------------------------------------ cycling


def _propagate_member(state, cat, controls_vec, schedule, k, obs_times,
                      raster_times, cadence, h_wet, with_checkpoint):
    """Spin up 3 h before the window, then run it; returns the Trajectory."""
    t_start, t_wend = schedule.cycle_window(k)
    params = controls_to_parameters(controls_vec)

    warm = state.copy()
    if schedule.spin_up > 0:
        # restart from the window-start state, relabel the clock back and
        # let the state adjust to this member's controls before t_start
        warm.t = t_start - schedule.spin_up
        warm = swe.run(warm, cat, params, t_start, cadence=1.0e30,
                       h_wet=h_wet).final_state

    delta_h = controls_vec[DELTA_H]
    if np.any(delta_h != 0.0):
        warm, _ = swe.apply_state_correction(warm, cat.floodplain, delta_h)

    ckpts = (schedule.checkpoint_time(k),) if with_checkpoint else ()
    return swe.run(warm, cat, params, t_wend, checkpoint_times=ckpts,
                   obs_times=obs_times, raster_times=raster_times,
                   cadence=cadence, h_wet=h_wet)


def _propagate_all(ensemble, cat, controls, schedule, obs_times, raster_times,
                   cadence, h_wet, with_checkpoint, threads):
    k = ensemble.k
    jobs = [
        (ensemble.states[i], cat, controls[:, i], schedule, k, obs_times,
         raster_times, cadence, h_wet, with_checkpoint)
        for i in range(ensemble.n_members)
    ]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_propagate_member, *job) for job in jobs]
            results = []
            for i, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except NumericalBlowupError as exc:
                    raise NumericalBlowupError(
                        f"member {i} failed in cycle {k}: {exc}",
                        t=exc.t, cell=exc.cell, member=i) from exc
            return results
    results = []
    for i, job in enumerate(jobs):
        try:
            results.append(_propagate_member(*job))
        except NumericalBlowupError as exc:
            raise NumericalBlowupError(
                f"member {i} failed in cycle {k}: {exc}",
                t=exc.t, cell=exc.cell, member=i) from exc
    return results


def run_cycle(ensemble, cat, prior, observations, schedule, master_seed, *,
              lam=LAMBDA_SPREAD, bias=None, raster_times=(), cadence=900.0,
              h_wet=swe.H_WET, threads=1):
    """One assimilation cycle.

    Returns (next_ensemble, diagnostics, analysis_trajectories); the
    trajectories are the analyzed re-propagation of every member across
    the window (the background propagation when the window is empty).
    """
    k = ensemble.k
    t_start, t_wend = schedule.cycle_window(k)
    for o in observations:
        if not t_start < o.time <= t_wend:
            raise ConfigurationError(
                f"observation at t={o.time} outside cycle {k} window"
                f" ({t_start}, {t_wend}]")

    obs_times = tuple(sorted({o.time for o in observations}))
    has_wsr = any(o.kind == observe.WSR for o in observations)
    window_rasters = tuple(t for t in raster_times if t_start < t <= t_wend)

    fc_rngs = [stream(master_seed, "forecast", k, i)
               for i in range(ensemble.n_members)]
    controls_f, sigma_used = forecast_controls(
        prior, ensemble.controls, fc_rngs, lam=lam, has_wsr=has_wsr)

    if not observations:
        # nothing to assimilate: the background propagation is the analysis
        trajectories = _propagate_all(
            ensemble, cat, controls_f, schedule, obs_times, window_rasters,
            cadence, h_wet, True, threads)
        controls_a = controls_f
        clip_count = 0
    else:
        forecast_trajs = _propagate_all(
            ensemble, cat, controls_f, schedule, obs_times, (),
            cadence, h_wet, False, threads)
        y_f = np.column_stack([
            observe.model_equivalents(tr, observations, bias)
            for tr in forecast_trajs
        ])
        r_sigma = np.array([
            observe.wsr_sigma(o.time, t_start, t_wend)
            if o.kind == observe.WSR else o.sigma
            for o in observations
        ])
        ob_rngs = [stream(master_seed, "obs", k, i)
                   for i in range(ensemble.n_members)]
        y_o, clip_count = perturb_observations(observations, ob_rngs,
                                               sigmas=r_sigma)
        x_anoms = controls_f - controls_f.mean(axis=1, keepdims=True)
        y_anoms = y_f - y_f.mean(axis=1, keepdims=True)
        p_xy, p_yy = covariances(x_anoms, y_anoms)
        gain = kalman_gain(p_xy, p_yy, r_sigma ** 2)
        controls_a = analysis_update(controls_f, y_o, y_f, gain, prior)

        trajectories = _propagate_all(
            ensemble, cat, controls_a, schedule, obs_times, window_rasters,
            cadence, h_wet, True, threads)

    t_ckpt = schedule.checkpoint_time(k)
    next_states = tuple(tr.checkpoints[t_ckpt] for tr in trajectories)
    diagnostics = CycleDiagnostics(
        k=k, t_start=t_start, t_window_end=t_wend, n_obs=len(observations),
        has_wsr=has_wsr, sigma_used=sigma_used,
        mean_f=controls_f.mean(axis=1), std_f=controls_f.std(axis=1),
        mean_a=controls_a.mean(axis=1), std_a=controls_a.std(axis=1),
        obs_clip_count=clip_count,
    )
    next_ensemble = Ensemble(states=next_states, controls=controls_a, k=k + 1)
    return next_ensemble, diagnostics, trajectories


# -------------------------------------------------------------- diagnostics


def write_diagnostics_csv(path, diagnostics):
    """Per-cycle, per-entry forecast/analysis ensemble moments."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cycle", "entry", "mean_f", "std_f", "mean_a", "std_a"])
        for d in diagnostics:
            for j, name in enumerate(ENTRY_NAMES):
                writer.writerow([
                    d.k, name,
                    repr(float(d.mean_f[j])), repr(float(d.std_f[j])),
                    repr(float(d.mean_a[j])), repr(float(d.std_a[j])),
                ])
