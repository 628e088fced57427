"""Shared fixtures: the default catchment and some purpose-built small grids."""

import numpy as np
import pytest

from floodtwin import catchment as cm
from floodtwin import swe


@pytest.fixture(scope="session")
def cat():
    """The default synthetic catchment (session-scoped; it is immutable)."""
    return cm.generate_synthetic_catchment()


def make_closed(source):
    """Same geometry as ``source`` but no inflow or outflow anywhere."""
    bc = cm.BoundaryConditions(
        hydrograph_t=np.array([-1.0e9, 1.0e9]),
        hydrograph_q=np.array([0.0, 0.0]),
        rating_curve=cm.RatingCurve(alpha=1.0, beta=1.0),
        inflow_cells=np.empty((0, 2), dtype=np.int64),
        outflow_cells=np.empty((0, 2), dtype=np.int64),
    )
    return cm.Catchment(grid=source.grid, friction=source.friction,
                        floodplain=source.floodplain, stations=source.stations,
                        boundaries=bc, config=dict(source.config))


@pytest.fixture(scope="session")
def closed_cat(cat):
    return make_closed(cat)


def make_channel_strip(nx=300, ny=4, dx=25.0, slope=1.0e-3, ks=40.0):
    """A wall-bounded uniform channel reach with a linear bed drop."""
    x_c = (np.arange(nx) + 0.5) * dx
    z_b = np.tile(slope * (nx * dx - x_c), (ny, 1))
    grid = cm.Grid(nx=nx, ny=ny, dx=dx, dy=dx, z_b=z_b,
                   cell_kind=np.full((ny, nx), cm.CHANNEL, dtype=np.int8))
    friction = cm.FrictionZoning(
        zone_id=np.full((ny, nx), 1, dtype=np.int8),
        calibrated_ks=(ks,) * 7,
    )
    floodplain = cm.FloodplainZones(
        zone_id=np.zeros((ny, nx), dtype=np.int8), cell_area=dx * dx)
    bc = cm.BoundaryConditions(
        hydrograph_t=np.array([-1.0e9, 1.0e9]),
        hydrograph_q=np.array([0.0, 0.0]),
        rating_curve=cm.RatingCurve(alpha=1.0, beta=1.0),
        inflow_cells=np.empty((0, 2), dtype=np.int64),
        outflow_cells=np.empty((0, 2), dtype=np.int64),
    )
    return cm.Catchment(grid=grid, friction=friction, floodplain=floodplain,
                        stations=(), boundaries=bc, config={})


def calibrated_controls():
    return swe.EffectiveParameters(ks=np.asarray(cm.CALIBRATED_KS, dtype=np.float64))


def flat_pool(catchment, freeboard=0.5):
    """Still state with a level surface ``freeboard`` above the highest bed."""
    grid = catchment.grid
    surface = grid.z_b[grid.active].max() + freeboard
    depth = np.where(grid.active, np.maximum(0.0, surface - grid.z_b), 0.0)
    return swe.still_state(catchment, depth_field=depth)
