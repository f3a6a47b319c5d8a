"""Synthetic plenoptic renderer: the independent forward-model oracle.

Every sensor pixel is traced from its (jittered) position through the
pinhole of the micro-lens it belongs to, refracted once at the thin main
lens, and intersected with the checkerboard plane.  The board colour is
evaluated analytically (cell parity), so the only image-formation
approximations are the per-pixel sample count and optional Gaussian
noise; all geometry is exact and every corner's ground-truth light-field
description is available in closed form.

Main-lens distortion, when enabled, warps the scene laterally at
constant depth — rays from one scene point stay concurrent after the
lens, so the distortion field is shared by all sub-apertures and leaves
disparities untouched.  This matches the distortion model the
calibration estimates.

Rendering is deterministic for a fixed seed: sample jitter and noise
come from counter-based (Philox) streams keyed on the seed, independent
of any outer parallelism.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GeometryError, InputError
from .model import (
    LFPoint,
    LightFieldIntrinsics,
    PhysicalCameraParams,
    Pose,
    intrinsics_from_physical,
)
from .raw import MicroLensGrid, RawImage

__all__ = [
    "CheckerboardSpec",
    "SceneBoard",
    "RenderConfig",
    "GroundTruth",
    "render",
    "render_white_image",
    "analytic_corner_lf_points",
    "pixel_chief_rays",
    "write_sidecar",
    "load_sidecar",
]


@dataclass(frozen=True)
class CheckerboardSpec:
    """Checkerboard with ``rows`` x ``cols`` interior corners spaced
    ``cell_size`` mm apart.  Corner (i, j) sits at board coordinates
    (j * cell_size, i * cell_size, 0); the painted pattern extends one
    cell beyond the outer corners on every side."""

    rows: int
    cols: int
    cell_size: float

    def __post_init__(self) -> None:
        if self.rows < 2 or self.cols < 2:
            raise InputError("board needs at least 2x2 corners")
        if self.cell_size <= 0:
            raise InputError("cell size must be positive")

    def corner_board_xy(self) -> np.ndarray:
        """(rows, cols, 2) board-frame corner coordinates in mm."""
        ii, jj = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        return np.stack([jj * self.cell_size, ii * self.cell_size], axis=-1).astype(np.float64)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "cell_size": self.cell_size}

    @classmethod
    def from_dict(cls, data: dict) -> "CheckerboardSpec":
        return cls(int(data["rows"]), int(data["cols"]), float(data["cell_size"]))


@dataclass(frozen=True)
class SceneBoard:
    """A checkerboard placed in front of the camera."""

    spec: CheckerboardSpec
    pose: Pose

    def __post_init__(self) -> None:
        corners = self.pose.apply(
            np.concatenate(
                [
                    self.spec.corner_board_xy().reshape(-1, 2),
                    np.zeros((self.spec.rows * self.spec.cols, 1)),
                ],
                axis=1,
            )
        )
        if np.any(corners[:, 2] <= 0.0):
            raise GeometryError("board has corners at non-positive depth")


@dataclass(frozen=True)
class RenderConfig:
    """Rendering controls.  ``samples_per_pixel`` and ``aperture_samples``
    multiply into the per-pixel ray count; because a pinhole micro-lens
    maps the pixel footprint one-to-one onto a patch of the main lens,
    both knobs jitter over the same integration domain."""

    cam: PhysicalCameraParams
    grid: MicroLensGrid
    samples_per_pixel: int = 4
    aperture_samples: int = 1
    noise_sigma: float = 0.0
    distortion: "DistortionLike | None" = None
    background: float = 0.5
    bright: float = 1.0
    dark: float = 0.0

    def __post_init__(self) -> None:
        if self.samples_per_pixel < 1 or self.aperture_samples < 1:
            raise InputError("sample counts must be at least 1")
        if self.noise_sigma < 0.0:
            raise InputError("noise sigma must be non-negative")


class DistortionLike:
    """Protocol stub: anything exposing k1, k2, p1, p2 (see calib module)."""

    k1: float
    k2: float
    p1: float
    p2: float


def _distort_arrays(xn, yn, dist):
    r2 = xn * xn + yn * yn
    radial = dist.k1 * r2 + dist.k2 * r2 * r2
    xd = xn * (1.0 + radial) + 2.0 * dist.p1 * xn * yn + dist.p2 * (r2 + 2.0 * xn * xn)
    yd = yn * (1.0 + radial) + dist.p1 * (r2 + 2.0 * yn * yn) + 2.0 * dist.p2 * xn * yn
    return xd, yd


def _undistort_arrays(xd, yd, dist, iterations: int = 8):
    xn, yn = np.array(xd, copy=True), np.array(yd, copy=True)
    for _ in range(iterations):
        xt, yt = _distort_arrays(xn, yn, dist)
        xn += xd - xt
        yn += yd - yt
    return xn, yn


_OWNER_CACHE: dict[tuple, np.ndarray] = {}


def _owner_centers(grid: MicroLensGrid, height: int, width: int) -> np.ndarray:
    """(H, W, 2) centre of the lens owning each pixel (by pixel centre)."""
    key = (grid, height, width)
    cached = _OWNER_CACHE.get(key)
    if cached is not None:
        return cached
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    i, j = grid.nearest(xs, ys)
    cx, cy = grid.center(i, j)
    out = np.stack([cx, cy], axis=-1)
    out.flags.writeable = False
    if len(_OWNER_CACHE) > 8:
        _OWNER_CACHE.clear()
    _OWNER_CACHE[key] = out
    return out


def sensor_shape(grid: MicroLensGrid) -> tuple[int, int]:
    """Smallest sensor that contains every sub-image disc."""
    cs = grid.centers().reshape(-1, 2)
    margin = 0.5 * grid.pitch
    width = int(math.ceil(cs[:, 0].max() + margin)) + 1
    height = int(math.ceil(cs[:, 1].max() + margin)) + 1
    return height, width


def _board_color(spec: CheckerboardSpec, bx, by, bright: float, dark: float, background: float):
    cell = spec.cell_size
    kx = np.floor(bx / cell).astype(np.int64)
    ky = np.floor(by / cell).astype(np.int64)
    inside = (kx >= -1) & (kx <= spec.cols - 1) & (ky >= -1) & (ky <= spec.rows - 1)
    parity = np.mod(kx + ky, 2)
    color = np.where(parity == 0, bright, dark)
    return np.where(inside, color, background)


def render(board: SceneBoard, cfg: RenderConfig, seed: int = 0) -> RawImage:
    """Ray-trace the board into a raw image.

    Rays that miss the board plane (or hit it behind the camera) see the
    background intensity.  Output is the sample mean plus Gaussian noise
    of ``noise_sigma``, clipped to [0, 1].
    """
    cam = cfg.cam
    height, width = sensor_shape(cfg.grid)
    centers = _owner_centers(cfg.grid, height, width)
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))

    F, L, l, d = cam.focal_main, cam.lens_to_mla, cam.mla_to_sensor, cam.pixel_pitch
    R, t = board.pose.R, board.pose.t
    normal = R[:, 2]
    n_dot_t = float(normal @ t)

    n_samples = cfg.samples_per_pixel * cfg.aperture_samples
    strata = int(math.ceil(math.sqrt(n_samples)))
    rng = np.random.Generator(np.random.Philox(seed))

    acc = np.zeros((height, width), dtype=np.float64)
    for k in range(n_samples):
        sx = (k % strata + 0.5) / strata - 0.5
        sy = (k // strata % strata + 0.5) / strata - 0.5
        jitter = (rng.random((height, width, 2)) - 0.5) / strata
        px = xs + sx + jitter[..., 0]
        py = ys + sy + jitter[..., 1]

        # physical pixel coordinates relative to owning sub-image
        x_s = d * (px - centers[..., 0])
        y_s = d * (py - centers[..., 1])
        x_c = d * (centers[..., 0] - cam.cx)
        y_c = d * (centers[..., 1] - cam.cy)

        s = -x_s * (L / l)
        tt = -y_s * (L / l)
        u = -x_s / l - x_c / (L + l) - s / F
        v = -y_s / l - y_c / (L + l) - tt / F

        denom = normal[0] * u + normal[1] * v + normal[2]
        num = n_dot_t - (normal[0] * s + normal[1] * tt)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = num / denom
        hit = np.isfinite(z) & (z > 0.0)
        z = np.where(hit, z, 1.0)

        if cfg.distortion is not None:
            # solve for depth along the ideally-traced ray such that the
            # laterally-unwarped point lies on the board plane
            for _ in range(6):
                hx = s + u * z
                hy = tt + v * z
                xn, yn = _undistort_arrays(hx / z, hy / z, cfg.distortion)
                dirn = normal[0] * xn + normal[1] * yn + normal[2]
                with np.errstate(divide="ignore", invalid="ignore"):
                    z_new = n_dot_t / dirn
                ok = np.isfinite(z_new) & (z_new > 0.0)
                z = np.where(ok & hit, z_new, z)
            hx = s + u * z
            hy = tt + v * z
            xn, yn = _undistort_arrays(hx / z, hy / z, cfg.distortion)
            hx, hy = xn * z, yn * z
        else:
            hx = s + u * z
            hy = tt + v * z

        rel = np.stack([hx - t[0], hy - t[1], z - t[2]], axis=-1)
        bx = rel @ R[:, 0]
        by = rel @ R[:, 1]
        color = _board_color(board.spec, bx, by, cfg.bright, cfg.dark, cfg.background)
        acc += np.where(hit, color, cfg.background)

    img = acc / n_samples
    if cfg.noise_sigma > 0.0:
        img = img + cfg.noise_sigma * rng.standard_normal(img.shape)
    return RawImage(np.clip(img, 0.0, 1.0))


def render_white_image(grid: MicroLensGrid, sigma_factor: float = 0.3) -> RawImage:
    """Synthetic white image: one Gaussian intensity spot per micro-lens
    (peak at the sub-image centre), as produced by a diffuser shot."""
    height, width = sensor_shape(grid)
    centers = _owner_centers(grid, height, width)
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    d2 = (xs - centers[..., 0]) ** 2 + (ys - centers[..., 1]) ** 2
    sigma = sigma_factor * grid.pitch
    return RawImage(np.exp(-d2 / (2.0 * sigma * sigma)))


def pixel_chief_rays(grid: MicroLensGrid, cam: PhysicalCameraParams, px: np.ndarray, py: np.ndarray):
    """Outward chief rays (s, t, u, v) for raw pixel positions, using the
    same ownership and tracing as :func:`render` at zero jitter."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    i, j = grid.nearest(px, py)
    cx, cy = grid.center(i, j)
    F, L, l, d = cam.focal_main, cam.lens_to_mla, cam.mla_to_sensor, cam.pixel_pitch
    x_s = d * (px - cx)
    y_s = d * (py - cy)
    x_c = d * (cx - cam.cx)
    y_c = d * (cy - cam.cy)
    s = -x_s * (L / l)
    t = -y_s * (L / l)
    u = -x_s / l - x_c / (L + l) - s / F
    v = -y_s / l - y_c / (L + l) - t / F
    return s, t, u, v


def analytic_corner_lf_points(
    board: SceneBoard,
    cam: PhysicalCameraParams,
    distortion=None,
) -> list[dict]:
    """Ground-truth light-field description of every board corner.

    Each entry carries the board index, the camera-frame point, the
    centre-view raw-pixel position (after optional distortion) and the
    disparity parameter.  Corners at non-positive depth are rejected.
    """
    intr = intrinsics_from_physical(cam)
    spec = board.spec
    xy = spec.corner_board_xy().reshape(-1, 2)
    pts = board.pose.apply(np.concatenate([xy, np.zeros((len(xy), 1))], axis=1))
    if np.any(pts[:, 2] <= 0.0):
        raise GeometryError("board has corners behind the camera")
    xn = pts[:, 0] / pts[:, 2]
    yn = pts[:, 1] / pts[:, 2]
    if distortion is not None:
        xn, yn = _distort_arrays(xn, yn, distortion)
    u = intr.fx * xn + intr.cx
    v = intr.fy * yn + intr.cy
    lam = -intr.K2 / pts[:, 2] - intr.K1
    out = []
    for k in range(len(xy)):
        i, j = divmod(k, spec.cols)
        out.append(
            {
                "i": int(i),
                "j": int(j),
                "x": float(u[k]),
                "y": float(v[k]),
                "lam": float(lam[k]),
                "X": float(pts[k, 0]),
                "Y": float(pts[k, 1]),
                "Z": float(pts[k, 2]),
            }
        )
    return out


# ---------------------------------------------------------------------------
# Ground-truth sidecar files


@dataclass(frozen=True)
class GroundTruth:
    cam: PhysicalCameraParams
    intrinsics: LightFieldIntrinsics
    grid: MicroLensGrid
    board: CheckerboardSpec
    pose: Pose
    corners: list = field(default_factory=list)
    config_hash: str | None = None


def write_sidecar(path: str | Path, gt: GroundTruth) -> None:
    cam = gt.cam
    payload = {
        "camera": {
            "focal_main": cam.focal_main,
            "lens_to_mla": cam.lens_to_mla,
            "mla_to_sensor": cam.mla_to_sensor,
            "pixel_pitch": cam.pixel_pitch,
            "cx": cam.cx,
            "cy": cam.cy,
        },
        "intrinsics": {
            "fx": gt.intrinsics.fx,
            "fy": gt.intrinsics.fy,
            "cx": gt.intrinsics.cx,
            "cy": gt.intrinsics.cy,
            "K1": gt.intrinsics.K1,
            "K2": gt.intrinsics.K2,
        },
        "grid": gt.grid.to_dict(),
        "board": gt.board.to_dict(),
        "pose": {"R": gt.pose.R.reshape(-1).tolist(), "T": gt.pose.t.tolist()},
        "corners": gt.corners,
    }
    if gt.config_hash:
        payload["config_hash"] = gt.config_hash
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_sidecar(path: str | Path) -> GroundTruth:
    path = Path(path)
    if not path.exists():
        raise InputError(f"sidecar not found: {path}")
    data = json.loads(path.read_text())
    cam = PhysicalCameraParams(**data["camera"])
    intr = LightFieldIntrinsics(**data["intrinsics"])
    return GroundTruth(
        cam=cam,
        intrinsics=intr,
        grid=MicroLensGrid.from_dict(data["grid"]),
        board=CheckerboardSpec.from_dict(data["board"]),
        pose=Pose(np.array(data["pose"]["R"]).reshape(3, 3), np.array(data["pose"]["T"])),
        corners=data["corners"],
        config_hash=data.get("config_hash"),
    )
