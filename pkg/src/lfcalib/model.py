"""Two-plane light-field camera geometry.

Conventions
-----------
The main-lens plane is the first ray-parameterization plane; the second
plane sits one unit of length along +Z, which points out of the camera.
A ray is ``[s, t, u, v]``: ``(s, t)`` is its intersection with the
main-lens plane in mm, ``(u, v)`` is the lateral offset of the ray, per
unit length along +Z, relative to that intersection (the ray slope).
A ray through the lens centre has ``s = t = 0``.

Pixels carry two representations.  Physically (mm): ``(x_s, y_s)`` is the
offset of the pixel from the centre of the sub-image it belongs to and
``(x_c, y_c)`` is that centre's position relative to the principal point.
By index (fractional pixels on the raw sensor): ``(x_sp, y_sp, x_cp,
y_cp)`` with the same split.  ``pixel_pitch`` is the only bridge between
mm and pixels.

The intrinsic description is deliberately split in two:

* a centre-view pinhole ``(fx, fy, cx, cy)`` relating scene points to the
  sub-image-centre coordinate where they appear at zero offset, and
* a disparity law ``(K1, K2)``: across sub-apertures the image of a point
  at depth Z moves linearly, with slope ``lam = -K2 / Z - K1`` per unit
  of offset index.

All lengths are mm, image coordinates are raw-sensor pixels, ``lam`` is
dimensionless.  Every function here is pure and safe to call from any
number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

__all__ = [
    "Ray4",
    "PixelPhysical4",
    "PixelIndex4",
    "PhysicalCameraParams",
    "LightFieldIntrinsics",
    "ScenePoint",
    "LFPoint",
    "Pose",
    "ProjectionMatrix",
    "pixel_index_to_physical",
    "refract_main_lens",
    "pixel_to_inner_ray",
    "projection_matrix",
    "intrinsics_from_physical",
    "center_view_project",
    "scene_to_pixel",
    "disparity_from_depth",
    "depth_from_disparity",
    "lf_point_slice",
]


@dataclass(frozen=True)
class Ray4:
    """Two-plane ray: intersection (s, t) with the main-lens plane [mm]
    and slope (u, v) [dimensionless offset per unit length along +Z]."""

    s: float
    t: float
    u: float
    v: float


@dataclass(frozen=True)
class PixelPhysical4:
    """Pixel in mm: (x_s, y_s) offset from its sub-image centre,
    (x_c, y_c) centre position relative to the principal point."""

    x_s: float
    y_s: float
    x_c: float
    y_c: float


@dataclass(frozen=True)
class PixelIndex4:
    """Pixel by fractional sensor index, same offset/centre split as
    :class:`PixelPhysical4`."""

    x_sp: float
    y_sp: float
    x_cp: float
    y_cp: float


@dataclass(frozen=True)
class PhysicalCameraParams:
    """Optical layout of the camera.

    focal_main     focal length of the main lens (mm)
    lens_to_mla    distance main lens -> micro-lens array (mm)
    mla_to_sensor  distance micro-lens array -> sensor (mm)
    pixel_pitch    physical distance between adjacent pixels (mm)
    cx, cy         pixel index where the optical axis meets the sensor
    """

    focal_main: float
    lens_to_mla: float
    mla_to_sensor: float
    pixel_pitch: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        for name in ("focal_main", "lens_to_mla", "mla_to_sensor", "pixel_pitch"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0.0:
                raise GeometryError(f"{name} must be positive and finite, got {value!r}")

    @property
    def focused_on_mla(self) -> bool:
        """True when lens_to_mla == focal_main; the disparity intercept
        degenerates to zero there (legal, but worth flagging)."""
        return self.lens_to_mla == self.focal_main


@dataclass(frozen=True)
class LightFieldIntrinsics:
    """Calibrated camera model: centre-view pinhole (fx, fy, cx, cy) in
    pixels plus the disparity law ``lam = -K2 / Z - K1`` (K1 dimensionless,
    K2 in mm).

    When derived from physical parameters, fx == fy == -(L + l) / pitch
    (signed, negative); a calibrated result may carry either sign and
    slightly different fx/fy.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    K1: float
    K2: float

    def __post_init__(self) -> None:
        if self.K2 == 0.0 or not math.isfinite(self.K2):
            raise GeometryError(f"K2 must be finite and nonzero, got {self.K2!r}")


@dataclass(frozen=True)
class ScenePoint:
    """Camera-frame scene point (mm); +Z points out of the camera."""

    x: float
    y: float
    z: float


@dataclass(frozen=True)
class LFPoint:
    """Complete light-field description of a 3D point: its centre-view
    position (raw-sensor pixels) and disparity parameter ``lam``."""

    x: float
    y: float
    lam: float


class Pose:
    """Rigid transform from board/world frame into the camera frame:
    X_cam = R @ X_world + t."""

    __slots__ = ("R", "t")

    def __init__(self, R: np.ndarray, t: np.ndarray) -> None:
        R = np.asarray(R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(t, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-8:
            raise GeometryError("rotation is not orthonormal")
        if np.linalg.det(R) < 0.0:
            raise GeometryError("rotation has negative determinant")
        R.flags.writeable = False
        t.flags.writeable = False
        self.R = R
        self.t = t

    @classmethod
    def from_rotvec(cls, rotvec, t) -> "Pose":
        from scipy.spatial.transform import Rotation

        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix(), t)

    def rotvec(self) -> np.ndarray:
        from scipy.spatial.transform import Rotation

        return Rotation.from_matrix(self.R).as_rotvec()

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) world points into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.R.T + self.t

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Pose(R={self.R.tolist()}, t={self.t.tolist()})"


# ---------------------------------------------------------------------------
# Elementary maps


def pixel_index_to_physical(p: PixelIndex4, cam: PhysicalCameraParams) -> PixelPhysical4:
    """Convert a pixel from index form to physical form (mm):
    [x_s, y_s, x_c, y_c] = pitch * [x_sp, y_sp, x_cp - cx, y_cp - cy]."""
    d = cam.pixel_pitch
    return PixelPhysical4(
        x_s=d * p.x_sp,
        y_s=d * p.y_sp,
        x_c=d * (p.x_cp - cam.cx),
        y_c=d * (p.y_cp - cam.cy),
    )


def refract_main_lens(ray_in: Ray4, focal: float) -> Ray4:
    """Thin-lens refraction at the main lens: the intersection point is
    unchanged, the slope picks up -s/F (and -t/F)."""
    if focal <= 0.0:
        raise GeometryError(f"focal length must be positive, got {focal!r}")
    return Ray4(
        s=ray_in.s,
        t=ray_in.t,
        u=ray_in.u - ray_in.s / focal,
        v=ray_in.v - ray_in.t / focal,
    )


def pixel_to_inner_ray(p: PixelPhysical4, cam: PhysicalCameraParams) -> Ray4:
    """Ray inside the camera for a physical pixel: from the pixel through
    its micro-lens pinhole, expressed on the main-lens plane.

    s = -x_s * L / l,  u = -x_s / l - x_c / (L + l)   (t, v analogous).
    """
    L = cam.lens_to_mla
    l = cam.mla_to_sensor
    return Ray4(
        s=-p.x_s * L / l,
        t=-p.y_s * L / l,
        u=-p.x_s / l - p.x_c / (L + l),
        v=-p.y_s / l - p.y_c / (L + l),
    )


@dataclass(frozen=True)
class ProjectionMatrix:
    """Homogeneous 5x5 map [x_sp, y_sp, x_cp, y_cp, 1] -> [s, t, u, v, 1],
    stored row-major.  Apply it with :meth:`apply`; it is a value type,
    not a general matrix."""

    rows: tuple[tuple[float, float, float, float, float], ...]

    def __post_init__(self) -> None:
        if len(self.rows) != 5 or any(len(r) != 5 for r in self.rows):
            raise GeometryError("projection matrix must be 5x5")

    def apply(self, p: PixelIndex4) -> Ray4:
        vec = (p.x_sp, p.y_sp, p.x_cp, p.y_cp, 1.0)
        out = [sum(r[k] * vec[k] for k in range(5)) for r in self.rows]
        if out[4] == 0.0:
            raise GeometryError("homogeneous component vanished")
        w = out[4]
        return Ray4(s=out[0] / w, t=out[1] / w, u=out[2] / w, v=out[3] / w)

    def as_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.float64)


def projection_matrix(cam: PhysicalCameraParams) -> ProjectionMatrix:
    """Single-multiply form of the full pixel-index -> outward-ray map
    (index-to-physical, pinhole ray, main-lens refraction composed)."""
    F = cam.focal_main
    L = cam.lens_to_mla
    l = cam.mla_to_sensor
    d = cam.pixel_pitch
    a = -(L / l) * d                     # s per x_sp
    b = (L / F - 1.0) * d / l            # u per x_sp
    c = -d / (L + l)                     # u per x_cp
    return ProjectionMatrix(rows=(
        (a, 0.0, 0.0, 0.0, 0.0),
        (0.0, a, 0.0, 0.0, 0.0),
        (b, 0.0, c, 0.0, -c * cam.cx),
        (0.0, b, 0.0, c, -c * cam.cy),
        (0.0, 0.0, 0.0, 0.0, 1.0),
    ))


def intrinsics_from_physical(cam: PhysicalCameraParams) -> LightFieldIntrinsics:
    """Derive the split intrinsics from the optical layout.

    fx = fy = -(L + l) / pitch
    K1 = -(L - F)(L + l) / (F l)
    K2 = (L / l)(L + l)

    The reparameterization identities -(L/l) * pitch == K2 / fx and
    (L/F - 1) * pitch / l == K1 / fx hold exactly.
    """
    F = cam.focal_main
    L = cam.lens_to_mla
    l = cam.mla_to_sensor
    f = -(L + l) / cam.pixel_pitch
    return LightFieldIntrinsics(
        fx=f,
        fy=f,
        cx=cam.cx,
        cy=cam.cy,
        K1=-(L - F) * (L + l) / (F * l),
        K2=(L / l) * (L + l),
    )


# ---------------------------------------------------------------------------
# Scene <-> pixel relations


def center_view_project(point: ScenePoint, intr: LightFieldIntrinsics) -> tuple[float, float]:
    """Centre-view pinhole projection: x_cp = fx * X / Z + cx (y analogous)."""
    if point.z == 0.0:
        raise GeometryError("cannot project a point at zero depth")
    return (
        intr.fx * point.x / point.z + intr.cx,
        intr.fy * point.y / point.z + intr.cy,
    )


def scene_to_pixel(
    point: ScenePoint,
    center_px: tuple[float, float],
    intr: LightFieldIntrinsics,
) -> tuple[float, float]:
    """Offset index at which a scene point appears inside the sub-image
    whose centre index is ``center_px``:

    x_sp = (fx * X - Z * (x_cp - cx)) / (K1 * Z + K2)   (y analogous).

    Raises when K1 * Z + K2 == 0: the point images exactly onto the
    micro-lens array, so no finite offset exists.
    """
    z = point.z
    denom = intr.K1 * z + intr.K2
    if abs(denom) < 1e-12 * max(abs(intr.K2), 1.0):
        raise GeometryError(f"point at depth {z} images onto the micro-lens array")
    x_cp, y_cp = center_px
    return (
        (intr.fx * point.x - z * (x_cp - intr.cx)) / denom,
        (intr.fy * point.y - z * (y_cp - intr.cy)) / denom,
    )


def disparity_from_depth(z: float, intr: LightFieldIntrinsics) -> float:
    """Disparity parameter of a point at depth z: lam = -K2 / z - K1."""
    if z == 0.0:
        raise GeometryError("depth must be nonzero")
    return -intr.K2 / z - intr.K1


def depth_from_disparity(lam: float, intr: LightFieldIntrinsics) -> float:
    """Invert the disparity law: z = -K2 / (lam + K1)."""
    denom = lam + intr.K1
    if abs(denom) < 1e-15 * max(1.0, abs(intr.K1)):
        raise GeometryError("disparity corresponds to a point at infinity")
    return -intr.K2 / denom


def lf_point_slice(lp: LFPoint, sub_aperture_offset: tuple[float, float]) -> tuple[float, float]:
    """Sub-image-centre coordinate at which an LF-point appears in the
    sub-aperture with offset index (x_sp, y_sp); the centre view is
    offset (0, 0).  Positions move linearly with the offset:
    x = x_centre + lam * x_sp."""
    ox, oy = sub_aperture_offset
    return (lp.x + lp.lam * ox, lp.y + lp.lam * oy)
