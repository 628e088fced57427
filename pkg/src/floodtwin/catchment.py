"""Synthetic catchment: grid, bathymetry, zoning, stations, boundaries.

The generated domain is a sloped rectangular channel flanked by dyked
floodplain: 6 riverbed friction segments along-flow plus one floodplain
friction zone (zone 0), 5 disjoint floodplain storage zones, 3 in-channel
gauges and 1 floodplain validation gauge, a hydrograph inflow on the
upstream face and a rating-curve outflow on the downstream face.
"""

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .asciigrid import read_ascii_grid, write_ascii_grid
from .errors import ConfigurationError, ExtrapolationError
from .timebase import DEFAULT_ANCHOR, from_iso, to_iso

CHANNEL, FLOODPLAIN, INACTIVE = 0, 1, 2

N_RIVERBED_SEGMENTS = 6
N_STORAGE_ZONES = 5

# Floodplain first, then riverbed segments upstream to downstream.
CALIBRATED_KS = (17.0, 45.0, 38.0, 38.0, 40.0, 40.0, 40.0)


def _freeze(arr):
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    dx: float
    dy: float
    z_b: np.ndarray          # (ny, nx) bottom elevation [m]
    cell_kind: np.ndarray    # (ny, nx) int8, CHANNEL/FLOODPLAIN/INACTIVE

    def __post_init__(self):
        if self.nx * self.ny <= 0 or self.dx <= 0 or self.dy <= 0:
            raise ConfigurationError("grid needs positive cell counts and sizes")
        if not np.all(np.isfinite(self.z_b)):
            raise ConfigurationError("z_b must be finite everywhere")

    @property
    def active(self):
        return self.cell_kind != INACTIVE

    @property
    def cell_area(self):
        return self.dx * self.dy


@dataclass(frozen=True)
class FrictionZoning:
    zone_id: np.ndarray          # (ny, nx) int8 in 0..6, 0 = floodplain
    calibrated_ks: np.ndarray    # (7,)

    def __post_init__(self):
        ks = np.asarray(self.calibrated_ks, dtype=np.float64)
        if ks.shape != (7,) or not np.all((ks > 0) & (ks < 200)):
            raise ConfigurationError("calibrated_ks must be 7 values in (0, 200)")

    def ks_field(self, ks_values):
        """Per-cell K_s from 7 per-zone values."""
        return np.asarray(ks_values, dtype=np.float64)[self.zone_id]


@dataclass(frozen=True)
class FloodplainZones:
    zone_id: np.ndarray    # (ny, nx) int8, 0 = outside any zone, 1..5 = zones
    cell_area: float

    def __post_init__(self):
        if self.zone_id.min() < 0 or self.zone_id.max() > N_STORAGE_ZONES:
            raise ConfigurationError(
                f"floodplain zone ids must lie in 0..{N_STORAGE_ZONES}")

    def mask(self, zone):
        return self.zone_id == zone

    @property
    def zone_area(self):
        counts = np.bincount(self.zone_id.ravel(), minlength=N_STORAGE_ZONES + 1)
        return counts[1:] * self.cell_area


@dataclass(frozen=True)
class Station:
    name: str
    col: int
    row: int
    role: str = "assimilated"    # or "validation"


@dataclass(frozen=True)
class RatingCurve:
    alpha: float
    beta: float
    h0: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigurationError("rating curve needs alpha > 0 and beta > 0")

    def discharge(self, level):
        """Q = alpha*(level - h0)^beta; levels below the datum clamp to 0.

        Returns (Q, clamped_flag).
        """
        if level < self.h0:
            return 0.0, True
        return self.alpha * (level - self.h0) ** self.beta, False


@dataclass(frozen=True)
class BoundaryConditions:
    hydrograph_t: np.ndarray    # seconds, strictly increasing
    hydrograph_q: np.ndarray    # m3/s, >= 0
    rating_curve: RatingCurve
    inflow_cells: np.ndarray    # (n, 2) row, col
    outflow_cells: np.ndarray   # (n, 2) row, col

    def __post_init__(self):
        t = np.asarray(self.hydrograph_t, dtype=np.float64)
        q = np.asarray(self.hydrograph_q, dtype=np.float64)
        if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
            raise ConfigurationError("hydrograph timestamps must be strictly increasing")
        if t.shape != q.shape or np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ConfigurationError("hydrograph discharges must be finite and >= 0")

    def hydrograph_at(self, t):
        """Linearly interpolated discharge at time t [s]."""
        ht, hq = self.hydrograph_t, self.hydrograph_q
        if t < ht[0] or t > ht[-1]:
            raise ExtrapolationError(
                f"t={t:.1f}s outside hydrograph span [{ht[0]:.1f}, {ht[-1]:.1f}]"
            )
        return float(np.interp(t, ht, hq))


@dataclass(frozen=True)
class Catchment:
    grid: Grid
    friction: FrictionZoning
    floodplain: FloodplainZones
    stations: tuple
    boundaries: BoundaryConditions
    config: dict = field(default_factory=dict, compare=False)

    def station(self, name):
        for st in self.stations:
            if st.name == name:
                return st
        raise ConfigurationError(f"no station named {name!r}")

    @property
    def assimilated_stations(self):
        return tuple(s for s in self.stations if s.role == "assimilated")

    def with_hydrograph(self, t, q):
        """Catchment with the same geometry and a new upstream hydrograph."""
        bc = replace(
            self.boundaries,
            hydrograph_t=_freeze(np.asarray(t, dtype=np.float64).copy()),
            hydrograph_q=_freeze(np.asarray(q, dtype=np.float64).copy()),
        )
        return replace(self, boundaries=bc)


DEFAULT_CATCHMENT_CONFIG = {
    "nx": 100,
    "ny": 20,
    "dx": 50.0,
    "dy": 50.0,
    "channel_rows": 2,
    "slope": 5.0e-4,
    "bank_height": 1.8,      # floodplain elevation above local channel bed [m]
    "dyke_height": 0.6,      # dyke crest above floodplain [m]
    "calibrated_ks": list(CALIBRATED_KS),
    "station_fractions": [0.15, 0.5, 0.85],
    "rating_beta": 5.0 / 3.0,
    "rating_alpha": 0.0,     # 0 -> derive from downstream Ks, width, slope
    "rating_h0": 0.0,
    "base_flow": 120.0,      # default flat hydrograph [m3/s]
}


def generate_synthetic_catchment(config=None):
    """Build the synthetic catchment from a config mapping.

    Unknown keys are rejected; missing keys take defaults. The layout is
    laterally symmetric about the channel axis.
    """
    cfg = dict(DEFAULT_CATCHMENT_CONFIG)
    if config:
        unknown = set(config) - set(cfg)
        if unknown:
            raise ConfigurationError(f"unknown catchment config keys: {sorted(unknown)}")
        cfg.update(config)

    nx, ny = int(cfg["nx"]), int(cfg["ny"])
    dx, dy = float(cfg["dx"]), float(cfg["dy"])
    n_chan = int(cfg["channel_rows"])
    if n_chan < 1 or ny < n_chan + 2 + 2:
        raise ConfigurationError("domain too narrow for channel + dykes + floodplain")
    if nx < max(N_RIVERBED_SEGMENTS, N_STORAGE_ZONES):
        raise ConfigurationError("domain too short for the zone layout")

    row_lo = (ny - n_chan) // 2
    channel_rows = np.arange(row_lo, row_lo + n_chan)
    dyke_rows = np.array([row_lo - 1, row_lo + n_chan])

    slope = float(cfg["slope"])
    length = nx * dx
    x_center = (np.arange(nx) + 0.5) * dx
    bed = slope * (length - x_center)    # downstream end at elevation ~0

    z_b = np.empty((ny, nx))
    z_b[:] = bed + float(cfg["bank_height"])
    z_b[dyke_rows] += float(cfg["dyke_height"])
    z_b[channel_rows] = bed

    cell_kind = np.full((ny, nx), FLOODPLAIN, dtype=np.int8)
    cell_kind[channel_rows] = CHANNEL

    grid = Grid(nx, ny, dx, dy, _freeze(z_b), _freeze(cell_kind))

    # Riverbed friction segments: 6 contiguous column bands; floodplain = 0.
    friction_id = np.zeros((ny, nx), dtype=np.int8)
    for seg, cols in enumerate(np.array_split(np.arange(nx), N_RIVERBED_SEGMENTS), start=1):
        friction_id[np.ix_(channel_rows, cols)] = seg
    friction = FrictionZoning(
        _freeze(friction_id),
        _freeze(np.asarray(cfg["calibrated_ks"], dtype=np.float64).copy()),
    )

    # Storage zones: 5 contiguous column bands over floodplain rows (not dykes).
    fp_rows = np.setdiff1d(np.arange(ny), np.concatenate([channel_rows, dyke_rows]))
    storage_id = np.zeros((ny, nx), dtype=np.int8)
    for zone, cols in enumerate(np.array_split(np.arange(nx), N_STORAGE_ZONES), start=1):
        storage_id[np.ix_(fp_rows, cols)] = zone
    floodplain = FloodplainZones(_freeze(storage_id), dx * dy)

    fractions = list(cfg["station_fractions"])
    if len(fractions) < 3:
        raise ConfigurationError("need at least 3 in-channel station positions")
    gauge_row = int(channel_rows[0])
    names = ["gauge_up", "gauge_mid", "gauge_down"]
    stations = [
        Station(name, col=min(nx - 1, int(round(f * nx))), row=gauge_row)
        for name, f in zip(names, fractions)
    ]
    # Validation gauge on the floodplain beside the channel, mid-reach.
    stations.append(
        Station("floodplain_mid", col=nx // 2, row=int(fp_rows[fp_rows < row_lo][-1]),
                role="validation")
    )

    width = n_chan * dy
    alpha = float(cfg["rating_alpha"])
    if alpha == 0.0:
        # Uniform-flow continuation: Q = Ks * W * sqrt(S) * h^(5/3).
        alpha = float(cfg["calibrated_ks"][-1]) * width * np.sqrt(max(slope, 1e-6))
    rating = RatingCurve(alpha, float(cfg["rating_beta"]), float(cfg["rating_h0"]))

    active_cols = np.where(cell_kind[:, 0] != INACTIVE)[0]
    inflow = np.column_stack([active_cols, np.zeros_like(active_cols)])
    outflow_rows = np.where(cell_kind[:, nx - 1] != INACTIVE)[0]
    outflow = np.column_stack([outflow_rows, np.full_like(outflow_rows, nx - 1)])

    base = float(cfg["base_flow"])
    hydro_t = np.array([-30 * 86400.0, 30 * 86400.0])
    hydro_q = np.array([base, base])
    bc = BoundaryConditions(
        _freeze(hydro_t), _freeze(hydro_q), rating,
        _freeze(inflow.astype(np.int64)), _freeze(outflow.astype(np.int64)),
    )

    cat = Catchment(grid, friction, floodplain, tuple(stations), bc, config=cfg)
    _validate_layout(cat)
    return cat


def _validate_layout(cat):
    kind = cat.grid.cell_kind
    active = cat.grid.active
    if np.any(cat.friction.zone_id[active] < 0) or np.any(cat.friction.zone_id[~active] != 0):
        raise ConfigurationError("friction zones must cover exactly the active cells")
    zones = cat.floodplain.zone_id
    if np.any((zones > 0) & (kind == CHANNEL)):
        raise ConfigurationError("storage zones must not intersect the channel")
    n_zones = len(np.unique(zones[zones > 0]))
    if n_zones < N_STORAGE_ZONES:
        raise ConfigurationError(f"layout produced {n_zones} < {N_STORAGE_ZONES} floodplain zones")
    if len([s for s in cat.stations if s.role == "assimilated"]) < 3:
        raise ConfigurationError("layout produced < 3 assimilated stations")
    names = [s.name for s in cat.stations]
    if len(set(names)) != len(names):
        raise ConfigurationError("station names must be unique")


# ---------------------------------------------------------------- serialization

def save_catchment(cat, directory):
    """Write a catchment to a directory; round-trips bit-exactly."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    g = cat.grid
    write_ascii_grid(directory / "bathymetry.asc", g.z_b, cellsize=g.dx)
    write_ascii_grid(directory / "cell_kind.asc", g.cell_kind.astype(float), cellsize=g.dx)
    write_ascii_grid(directory / "friction_zones.asc", cat.friction.zone_id.astype(float),
                     cellsize=g.dx)
    write_ascii_grid(directory / "floodplain_zones.asc", cat.floodplain.zone_id.astype(float),
                     cellsize=g.dx)
    meta = {
        "nx": g.nx, "ny": g.ny, "dx": g.dx, "dy": g.dy,
        "calibrated_ks": [repr(float(v)) for v in cat.friction.calibrated_ks],
        "stations": [
            {"name": s.name, "col": s.col, "row": s.row, "role": s.role}
            for s in cat.stations
        ],
        "rating_curve": {
            "alpha": repr(float(cat.boundaries.rating_curve.alpha)),
            "beta": repr(float(cat.boundaries.rating_curve.beta)),
            "h0": repr(float(cat.boundaries.rating_curve.h0)),
        },
        "inflow_cells": cat.boundaries.inflow_cells.tolist(),
        "outflow_cells": cat.boundaries.outflow_cells.tolist(),
        "config": {k: v for k, v in cat.config.items()},
    }
    (directory / "catchment.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    write_hydrograph_csv(directory / "hydrograph.csv",
                         cat.boundaries.hydrograph_t, cat.boundaries.hydrograph_q)


def load_catchment(directory):
    directory = Path(directory)
    z_b, _ = read_ascii_grid(directory / "bathymetry.asc")
    kind, _ = read_ascii_grid(directory / "cell_kind.asc")
    friction_id, _ = read_ascii_grid(directory / "friction_zones.asc")
    storage_id, _ = read_ascii_grid(directory / "floodplain_zones.asc")
    meta = json.loads((directory / "catchment.json").read_text())

    grid = Grid(meta["nx"], meta["ny"], meta["dx"], meta["dy"],
                _freeze(z_b), _freeze(kind.astype(np.int8)))
    friction = FrictionZoning(
        _freeze(friction_id.astype(np.int8)),
        _freeze(np.array([float(v) for v in meta["calibrated_ks"]])),
    )
    floodplain = FloodplainZones(_freeze(storage_id.astype(np.int8)), meta["dx"] * meta["dy"])
    stations = tuple(Station(**s) for s in meta["stations"])
    rc = RatingCurve(float(meta["rating_curve"]["alpha"]),
                     float(meta["rating_curve"]["beta"]),
                     float(meta["rating_curve"]["h0"]))
    t, q = read_hydrograph_csv(directory / "hydrograph.csv")
    bc = BoundaryConditions(
        _freeze(t), _freeze(q), rc,
        _freeze(np.array(meta["inflow_cells"], dtype=np.int64).reshape(-1, 2)),
        _freeze(np.array(meta["outflow_cells"], dtype=np.int64).reshape(-1, 2)),
    )
    return Catchment(grid, friction, floodplain, stations, bc, config=meta.get("config", {}))


def write_hydrograph_csv(path, t, q, anchor=DEFAULT_ANCHOR):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp_iso8601", "discharge_m3s"])
        for ti, qi in zip(t, q):
            writer.writerow([to_iso(ti, anchor), repr(float(qi))])


def read_hydrograph_csv(path, anchor=DEFAULT_ANCHOR):
    t, q = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["timestamp_iso8601", "discharge_m3s"]:
            raise ConfigurationError(f"{path}: unexpected hydrograph header {header}")
        for row in reader:
            t.append(from_iso(row[0], anchor))
            q.append(float(row[1]))
    return np.asarray(t), np.asarray(q)
