"""Observation operators, error models and observation file I/O.

Two observation kinds exist: point water levels at named gauges and the
wet-surface ratio (WSR) of named floodplain storage zones. Both map a
model state to the observed quantity; the error models attach a standard
deviation to each real observation.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .swe import H_WET
from .timebase import DEFAULT_ANCHOR, from_iso, to_iso

GAUGE = "gauge"
WSR = "wsr"

TAU_GAUGE = 0.15        # relative gauge error
SIGMA_GAUGE_MIN = 0.01  # floor [m] when the relative rule degenerates
WSR_SIGMA_HI = 0.2      # WSR error at the start of an assimilation window
WSR_SIGMA_LO = 0.1      # ... at its end


@dataclass(frozen=True)
class Observation:
    kind: str       # GAUGE or WSR
    target: object  # station name (str) or zone number (int)
    time: float     # model seconds
    value: float
    sigma: float

    def __post_init__(self):
        if self.kind not in (GAUGE, WSR):
            raise ConfigurationError(f"unknown observation kind {self.kind!r}")
        if not np.isfinite(self.value):
            raise ConfigurationError("observation value must be finite")
        if not self.sigma > 0:
            raise ConfigurationError("observation sigma must be > 0")
        if self.kind == WSR and not 0.0 <= self.value <= 1.0:
            raise ConfigurationError(f"WSR value {self.value} outside [0, 1]")


@dataclass(frozen=True)
class BiasTable:
    """Constant systematic offsets subtracted from model equivalents."""

    offsets: dict = field(default_factory=dict)    # (kind, target) -> offset

    def __post_init__(self):
        for key, value in self.offsets.items():
            if not np.isfinite(value):
                raise ConfigurationError(f"bias for {key} must be finite")

    def offset(self, kind, target):
        return self.offsets.get((kind, target), 0.0)


# ----------------------------------------------------------------- operators


def gauge_level(state, grid, station):
    """Free-surface elevation at the station cell.

    Returns (level, dry); a dry cell reports the bed elevation.
    """
    h = float(state.h[station.row, station.col])
    z = float(grid.z_b[station.row, station.col])
    return z + h, h < 1.0e-3


def wet_surface_ratio(state, zones, zone, h_wet=H_WET):
    """Fraction of the zone's cells holding more than ``h_wet`` of water."""
    sel = zones.zone_id == zone
    n = int(np.count_nonzero(sel))
    if n == 0:
        raise ConfigurationError(f"storage zone {zone} is empty")
    return float(np.count_nonzero(state.h[sel] > h_wet)) / n


def model_equivalents(trajectory, observations, bias=None):
    """Model values for each observation, bias-corrected, in input order.

    Every observation time must be a recorded trajectory output time.
    """
    bias = bias or BiasTable()
    out = np.empty(len(observations))
    for m, obs in enumerate(observations):
        row = trajectory.row_for_time(obs.time)
        if obs.kind == GAUGE:
            raw = trajectory.station_levels[row, trajectory.station_index(obs.target)]
        else:
            zone = int(obs.target)
            if not 1 <= zone <= trajectory.zone_wsr.shape[1]:
                raise ConfigurationError(f"no storage zone {zone} on trajectory")
            raw = trajectory.zone_wsr[row, zone - 1]
        out[m] = raw - bias.offset(obs.kind, obs.target)
    return out


# -------------------------------------------------------------- error models


def gauge_sigma(obs_value, tau=TAU_GAUGE, sigma_min=SIGMA_GAUGE_MIN):
    """Relative error sigma = tau * value, floored for degenerate inputs.

    Returns (sigma, floored).
    """
    sigma = tau * obs_value
    if sigma < sigma_min:
        return sigma_min, True
    return float(sigma), False


def wsr_sigma(obs_time, t_start, t_end, sigma_hi=WSR_SIGMA_HI, sigma_lo=WSR_SIGMA_LO):
    """WSR error decreasing linearly from sigma_hi at t_start to sigma_lo at t_end."""
    if not t_start < t_end:
        raise ConfigurationError("wsr_sigma window must have t_start < t_end")
    if not t_start <= obs_time <= t_end:
        raise ConfigurationError(
            f"observation time {obs_time} outside window [{t_start}, {t_end}]")
    frac = (obs_time - t_start) / (t_end - t_start)
    return sigma_hi + (sigma_lo - sigma_hi) * frac


def in_window(observations, t_start, t_end):
    """Observations with t_start < time <= t_end, input order preserved."""
    return [o for o in observations if t_start < o.time <= t_end]


# ----------------------------------------------------------------- file I/O

_HEADER = ["time_iso8601", "kind", "target", "value", "sigma"]


def write_observations_csv(path, observations, anchor=DEFAULT_ANCHOR):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HEADER)
        for o in observations:
            writer.writerow([to_iso(o.time, anchor), o.kind, o.target,
                             repr(float(o.value)), repr(float(o.sigma))])


def read_observations_csv(path, anchor=DEFAULT_ANCHOR):
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _HEADER:
            raise ConfigurationError(f"{path}: unexpected observation header {header}")
        for row in reader:
            kind = row[1]
            target = int(row[2]) if kind == WSR else row[2]
            out.append(Observation(kind=kind, target=target,
                                   time=from_iso(row[0], anchor),
                                   value=float(row[3]), sigma=float(row[4])))
    return out
