"""Shared synthetic scenes for the test suite.

The small scene keeps unit tests fast; the acceptance module builds its
own larger scenario.
"""

import numpy as np
import pytest

from lfcalib.model import PhysicalCameraParams, Pose, intrinsics_from_physical
from lfcalib.raw import MicroLensGrid
from lfcalib.render import CheckerboardSpec, RenderConfig, SceneBoard


def small_camera() -> PhysicalCameraParams:
    # 41x41 lenses of 9 px pitch, centre-view focal ~ -892.9 px
    return PhysicalCameraParams(
        focal_main=12.05,
        lens_to_mla=12.0,
        mla_to_sensor=0.5,
        pixel_pitch=0.014,
        cx=184.0,
        cy=184.0,
    )


def small_grid() -> MicroLensGrid:
    return MicroLensGrid(
        layout="rectangular", pitch=9.0, rotation=0.0, origin=(4.0, 4.0), rows=41, cols=41
    )


def frontal_board(z: float = 500.0, cell: float = 30.0, rows: int = 4, cols: int = 5,
                  tilt_deg: float = 8.0) -> SceneBoard:
    spec = CheckerboardSpec(rows=rows, cols=cols, cell_size=cell)
    center = np.array([(cols - 1) * cell / 2.0, (rows - 1) * cell / 2.0, 0.0])
    pose = Pose.from_rotvec(np.deg2rad([tilt_deg, -tilt_deg / 2, 3.0]), np.zeros(3))
    t = np.array([0.0, 0.0, z]) - pose.R @ center
    return SceneBoard(spec=spec, pose=Pose(pose.R, t))


@pytest.fixture(scope="session")
def scene():
    cam = small_camera()
    grid = small_grid()
    board = frontal_board()
    cfg = RenderConfig(cam=cam, grid=grid, samples_per_pixel=9, aperture_samples=1)
    return {
        "cam": cam,
        "grid": grid,
        "board": board,
        "cfg": cfg,
        "intr": intrinsics_from_physical(cam),
    }
