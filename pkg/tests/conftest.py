import numpy as np
import pytest

from strider.mapping import SteppableGrid, TerrainBox, uniform_grid
from strider.pattern import LipmParams, preview_gains
from strider.planner import Footstep, Side
from strider.sim import Scenario, WalkParams


@pytest.fixture(scope="session")
def lipm_params():
    return LipmParams()


@pytest.fixture(scope="session")
def gains(lipm_params):
    return preview_gains(lipm_params)


@pytest.fixture
def flat_grid():
    return uniform_grid(2.0, 1.0, 0.01)


def grid_from_rects(rects, resolution=0.01, x0=0.0, y0=-0.5, nx=120, ny=100):
    """Exact test grid: a cell is steppable when its center lies in a rect.

    rects: list of (x_lo, x_hi, y_lo, y_hi, height, plane_id).
    """
    steppable = np.zeros((nx, ny), dtype=bool)
    height = np.full((nx, ny), np.nan)
    plane_id = np.full((nx, ny), -1, dtype=np.int32)
    cx = x0 + (np.arange(nx) + 0.5) * resolution
    cy = y0 + (np.arange(ny) + 0.5) * resolution
    cxg, cyg = np.meshgrid(cx, cy, indexing="ij")
    for x_lo, x_hi, y_lo, y_hi, h, pid in rects:
        sel = (cxg >= x_lo) & (cxg <= x_hi) & (cyg >= y_lo) & (cyg <= y_hi)
        steppable[sel] = True
        height[sel] = h
        plane_id[sel] = pid
    return SteppableGrid(resolution, x0, y0, steppable, height, plane_id)


# Two stones sized 1.5x the footprint, one nominal stride apart.
TWO_STONES = [
    (0.09, 0.45, 0.0175, 0.2125, 0.0, 0),  # left-target stone at (0.27, 0.115)
    (0.36, 0.72, -0.2075, -0.0125, 0.0, 1),  # right-target stone at (0.54, -0.11)
]
TWO_STONES_ROOT = Footstep(Side.RIGHT, 0.0, -0.11)
TWO_STONES_CENTERS = {Side.LEFT: (0.27, 0.115), Side.RIGHT: (0.54, -0.11)}


@pytest.fixture
def two_stone_grid():
    return grid_from_rects(TWO_STONES)


def flat_runway_scenario(**overrides):
    base = dict(
        name="flat_runway",
        terrain=[TerrainBox("runway", (1.7, 0.0, -0.05), (4.4, 0.8, 0.1))],
        walk=WalkParams(step_time=0.5, dsp_fraction=0.3, speed_target=0.3),
        cloud_sigma=0.002,
        cloud_density=150000.0,
        seed=0,
        mapping={"ransac_min_inliers": 300},
        stance_left=(0.0, 0.13, 0.0, 0.0),
        stance_right=(0.0, -0.13, 0.0, 0.0),
        course_end_x=3.2,
        max_sim_time=30.0,
    )
    base.update(overrides)
    return Scenario(**base)
