"""Two-step calibration.

Step 1 estimates the centre-view pinhole (fx, fy, cx, cy), the main-lens
distortion, and the per-shot poses from corner positions alone, exactly
as for a conventional camera: per-image homographies, a closed-form
intrinsic solve from absolute-conic constraints (zero skew), pose
decomposition, then a damped least-squares refinement of everything over
reprojection error.

Step 2 takes the detected corner disparities, computes each corner's
depth from the Step-1 pose, and solves the homogeneous system
``[1/Z, 1, lam] . [K2, K1, 1] = 0`` for the disparity law by SVD.  No
global re-optimization follows: Step 2 leaves every Step-1 quantity
untouched, which is what keeps lateral and depth errors decoupled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EstimationError, GeometryError, InputError
from .geomfit import homography_dlt, least_singular_vector, nearest_rotation
from .model import LightFieldIntrinsics, Pose, ScenePoint

__all__ = [
    "DistortionCoeffs",
    "CornerObservations",
    "Step1Result",
    "CalibrationResult",
    "apply_distortion",
    "undistort_points",
    "project_center_view",
    "step1_closed_form",
    "step1_refine",
    "corner_depth",
    "step2_solve",
    "calibrate_full",
    "observations_from_board",
    "save_calibration",
    "load_calibration",
]


@dataclass(frozen=True)
class DistortionCoeffs:
    """Second-order radial (k1, k2) plus tangential (p1, p2) distortion
    on normalized centre-view coordinates."""

    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.p1, self.p2])


def apply_distortion(xn, yn, dist: DistortionCoeffs):
    """Distort normalized coordinates: radial term xn(k1 r^2 + k2 r^4),
    tangential term (2 p1 xn yn + p2(r^2 + 2 xn^2)) and the y analogue,
    both added to the undistorted point.  Accepts arrays."""
    xn = np.asarray(xn, dtype=np.float64)
    yn = np.asarray(yn, dtype=np.float64)
    r2 = xn * xn + yn * yn
    radial = dist.k1 * r2 + dist.k2 * r2 * r2
    xd = xn + xn * radial + 2.0 * dist.p1 * xn * yn + dist.p2 * (r2 + 2.0 * xn * xn)
    yd = yn + yn * radial + dist.p1 * (r2 + 2.0 * yn * yn) + 2.0 * dist.p2 * xn * yn
    return xd, yd


def undistort_points(xd, yd, dist: DistortionCoeffs, iterations: int = 10):
    """Invert :func:`apply_distortion` by fixed-point iteration (the
    distortion is a small perturbation at calibration field angles)."""
    xd = np.asarray(xd, dtype=np.float64)
    yd = np.asarray(yd, dtype=np.float64)
    xn = xd.copy()
    yn = yd.copy()
    for _ in range(iterations):
        xt, yt = apply_distortion(xn, yn, dist)
        xn += xd - xt
        yn += yd - yt
    return xn, yn


@dataclass(frozen=True)
class CornerObservations:
    """Per-image detected corners: board coordinates (mm), centre-view
    positions (raw px) and disparities, already filtered to valid ones."""

    board_xy: np.ndarray  # (N, 2)
    image_xy: np.ndarray  # (N, 2)
    lam: np.ndarray  # (N,)

    def __post_init__(self) -> None:
        if not (len(self.board_xy) == len(self.image_xy) == len(self.lam)):
            raise InputError("observation arrays must have equal length")


def observations_from_board(board, board_spec) -> CornerObservations:
    """Valid corners of a DetectedBoard paired with board coordinates."""
    xy = board_spec.corner_board_xy()
    ok = board.valid
    return CornerObservations(
        board_xy=xy[ok],
        image_xy=board.points[ok][:, :2],
        lam=board.points[ok][:, 2],
    )


# ---------------------------------------------------------------------------
# Step 1: centre-view pinhole, distortion, poses


def project_center_view(
    board_xy: np.ndarray,
    pose: Pose,
    fx: float,
    fy: float,
    cx: float,
    cy: float,
    dist: DistortionCoeffs,
) -> np.ndarray:
    """Pinhole projection of board points with distortion applied on the
    normalized coordinates."""
    pts = np.concatenate([board_xy, np.zeros((len(board_xy), 1))], axis=1)
    cam = pose.apply(pts)
    z = cam[:, 2]
    if np.any(z <= 0):
        raise GeometryError("board point at non-positive depth")
    xd, yd = apply_distortion(cam[:, 0] / z, cam[:, 1] / z, dist)
    return np.stack([fx * xd + cx, fy * yd + cy], axis=-1)


@dataclass
class Step1Result:
    fx: float
    fy: float
    cx: float
    cy: float
    dist: DistortionCoeffs
    poses: list[Pose]
    rms_reprojection: float
    conditioning_warning: bool = False
    converged: bool = True


def _intrinsics_from_homographies(Hs: list[np.ndarray]):
    """Zero-skew absolute-conic solve: each homography contributes the
    two standard constraints on B = K^-T K^-1 (b12 = 0 eliminated)."""

    def vrow(H, a, b):
        h_a, h_b = H[:, a], H[:, b]
        return np.array(
            [
                h_a[0] * h_b[0],
                h_a[1] * h_b[1],
                h_a[2] * h_b[0] + h_a[0] * h_b[2],
                h_a[2] * h_b[1] + h_a[1] * h_b[2],
                h_a[2] * h_b[2],
            ]
        )

    rows = []
    for H in Hs:
        rows.append(vrow(H, 0, 1))
        rows.append(vrow(H, 0, 0) - vrow(H, 1, 1))
    V = np.asarray(rows)
    b, _, sv = least_singular_vector(V)
    if sv[-2] < 1e-10 * sv[0]:
        raise EstimationError("degenerate pose variety: intrinsic constraints are rank-deficient")
    B11, B22, B13, B23, B33 = b
    if B11 < 0:
        B11, B22, B13, B23, B33 = -B11, -B22, -B13, -B23, -B33
    cx = -B13 / B11
    cy = -B23 / B22
    lam_star = B33 - B13 * B13 / B11 - B23 * B23 / B22
    if lam_star <= 0 or B22 <= 0:
        raise EstimationError("closed-form intrinsics are not positive definite")
    fx = math.sqrt(lam_star / B11)
    fy = math.sqrt(lam_star / B22)
    cond = sv[-2] / sv[0]
    return fx, fy, cx, cy, cond


def _pose_from_homography(H: np.ndarray, fx, fy, cx, cy) -> Pose:
    Kinv = np.array(
        [
            [1.0 / fx, 0.0, -cx / fx],
            [0.0, 1.0 / fy, -cy / fy],
            [0.0, 0.0, 1.0],
        ]
    )
    M = Kinv @ H
    scale = 2.0 / (np.linalg.norm(M[:, 0]) + np.linalg.norm(M[:, 1]))
    M = M * scale
    if M[2, 2] < 0:  # board must sit in front of the camera
        M = -M
    r1, r2, t = M[:, 0], M[:, 1], M[:, 2]
    R = nearest_rotation(np.stack([r1, r2, np.cross(r1, r2)], axis=1))
    return Pose(R, t)


def step1_closed_form(observations: list[CornerObservations]) -> Step1Result:
    """Closed-form centre-view calibration: normalized-DLT homographies,
    conic solve for (fx, fy, cx, cy), homography decomposition for the
    poses.  Needs at least 3 images with at least 4 corners each."""
    usable = [o for o in observations if len(o.board_xy) >= 4]
    if len(usable) < 3:
        raise EstimationError(
            f"need at least 3 images with 4+ corners, have {len(usable)}"
        )
    if len(usable) != len(observations):
        raise EstimationError("every image must provide at least 4 corners")
    Hs = [homography_dlt(o.board_xy, o.image_xy) for o in observations]
    fx, fy, cx, cy, cond = _intrinsics_from_homographies(Hs)
    poses = [_pose_from_homography(H, fx, fy, cx, cy) for H in Hs]
    resid = []
    dist0 = DistortionCoeffs()
    for o, pose in zip(observations, poses):
        proj = project_center_view(o.board_xy, pose, fx, fy, cx, cy, dist0)
        resid.append(((proj - o.image_xy) ** 2).sum(axis=1))
    rms = float(np.sqrt(np.concatenate(resid).mean()))
    return Step1Result(
        fx=fx,
        fy=fy,
        cx=cx,
        cy=cy,
        dist=dist0,
        poses=poses,
        rms_reprojection=rms,
        conditioning_warning=cond < 1e-6,
    )


def _pack(step1: Step1Result) -> np.ndarray:
    x = [step1.fx, step1.fy, step1.cx, step1.cy, *step1.dist.as_array()]
    for pose in step1.poses:
        x.extend(pose.rotvec())
        x.extend(pose.t)
    return np.asarray(x, dtype=np.float64)


def _unpack(x: np.ndarray, n_images: int):
    fx, fy, cx, cy = x[:4]
    dist = DistortionCoeffs(*x[4:8])
    poses = []
    for k in range(n_images):
        rv = x[8 + 6 * k : 11 + 6 * k]
        t = x[11 + 6 * k : 14 + 6 * k]
        poses.append(Pose.from_rotvec(rv, t))
    return fx, fy, cx, cy, dist, poses


def step1_refine(
    step1: Step1Result,
    observations: list[CornerObservations],
    max_iterations: int = 100,
) -> Step1Result:
    """Maximum-likelihood refinement: damped least squares over the
    intrinsics, all four distortion coefficients, and every pose
    (axis-angle chart).  The returned cost never exceeds the input's."""
    from scipy.optimize import least_squares

    n_images = len(observations)

    def residuals(x):
        fx, fy, cx, cy, dist, poses = _unpack(x, n_images)
        out = []
        for o, pose in zip(observations, poses):
            proj = project_center_view(o.board_xy, pose, fx, fy, cx, cy, dist)
            out.append((proj - o.image_xy).ravel())
        return np.concatenate(out)

    x0 = _pack(step1)
    r0 = residuals(x0)
    sol = least_squares(
        residuals,
        x0,
        method="trf",
        ftol=1e-12,
        xtol=1e-12,
        gtol=1e-12,
        max_nfev=max_iterations * (len(x0) + 1),
    )
    converged = bool(sol.cost <= 0.5 * float(r0 @ r0) + 1e-15)
    x = sol.x if converged else x0
    fx, fy, cx, cy, dist, poses = _unpack(x, n_images)
    rms = float(np.sqrt(np.mean(residuals(x) ** 2)))
    return Step1Result(
        fx=float(fx),
        fy=float(fy),
        cx=float(cx),
        cy=float(cy),
        dist=dist,
        poses=poses,
        rms_reprojection=rms,
        conditioning_warning=step1.conditioning_warning,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# Step 2: disparity law


def corner_depth(pose: Pose, board_xy) -> ScenePoint:
    """Camera-frame position of a board corner: [X,Y,Z] = R [u,v,0] + t;
    rejects corners behind the camera."""
    u, v = board_xy
    p = pose.R @ np.array([u, v, 0.0]) + pose.t
    if p[2] <= 0:
        raise GeometryError(f"board corner at non-positive depth {p[2]:.3f}")
    return ScenePoint(float(p[0]), float(p[1]), float(p[2]))


def step2_solve(depths, disparities) -> tuple[float, float, float, tuple[float, float]]:
    """Solve the disparity law from (Z, lam) samples.

    Rows [1/Z, 1, lam] are unit-normalized and stacked; the right
    singular vector of least singular value, dehomogenized by its third
    component, gives (K2, K1).  Returns (K1, K2, residual, ls_diagnostic)
    where ``residual`` is the least singular value of the normalized
    system and ``ls_diagnostic`` is an ordinary least-squares fit of
    lam = -K2/Z - K1 reported for comparison only.
    """
    z = np.asarray(depths, dtype=np.float64)
    lam = np.asarray(lam_arr := np.asarray(disparities, dtype=np.float64))
    if z.shape != lam.shape or z.ndim != 1:
        raise InputError("depths and disparities must be 1-D arrays of equal length")
    if len(z) < 2:
        raise EstimationError("need at least two (depth, disparity) samples")
    if np.any(z == 0):
        raise GeometryError("zero depth in step-2 samples")
    A = np.stack([1.0 / z, np.ones_like(z), lam], axis=1)
    A = A / np.linalg.norm(A, axis=1, keepdims=True)
    v, sigma_min, sv = least_singular_vector(A)
    if len(z) > 2 and sv[-2] < 1e-10 * sv[0]:
        raise EstimationError("rank-deficient system: depths do not vary")
    if sv.shape[0] < 3 or sv[1] < 1e-12 * sv[0]:
        raise EstimationError("rank-deficient system: depths do not vary")
    if abs(v[2]) < 1e-12:
        raise EstimationError("degenerate solution: disparity component vanished")
    K2 = float(v[0] / v[2])
    K1 = float(v[1] / v[2])
    # diagnostic ordinary LS fit lam = -K2/Z - K1
    M = np.stack([-1.0 / z, -np.ones_like(z)], axis=1)
    sol, *_ = np.linalg.lstsq(M, lam, rcond=None)
    return K1, K2, float(sigma_min), (float(sol[1]), float(sol[0]))


# ---------------------------------------------------------------------------
# Full pipeline


@dataclass
class CalibrationResult:
    intrinsics: LightFieldIntrinsics
    dist: DistortionCoeffs
    poses: list[Pose]
    rms_reprojection: float
    per_image_rms: list[float]
    k1k2_residual: float
    disparity_rms: float
    step2_ls_diagnostic: tuple[float, float]
    n_corners: int
    config_hash: str | None = None
    notes: list[str] = field(default_factory=list)


def calibrate_full(
    observations: list[CornerObservations],
    refine: bool = True,
) -> CalibrationResult:
    """Run both calibration steps on per-image corner observations.

    Step 1 works on centre-view positions only; Step 2 then pairs each
    valid corner's pose-derived depth with its detected disparity.  The
    Step-1 output is not revisited afterwards.
    """
    closed = step1_closed_form(observations)
    step1 = step1_refine(closed, observations) if refine else closed
    notes = []
    if step1.conditioning_warning:
        notes.append("closed-form conditioning warning: poses nearly degenerate")
    if not step1.converged:
        notes.append("refinement did not improve the closed form; kept best iterate")

    depths = []
    lams = []
    for o, pose in zip(observations, step1.poses):
        for k in range(len(o.board_xy)):
            depths.append(corner_depth(pose, o.board_xy[k]).z)
            lams.append(o.lam[k])
    K1, K2, resid, ls_diag = step2_solve(np.asarray(depths), np.asarray(lams))

    intr = LightFieldIntrinsics(
        fx=step1.fx, fy=step1.fy, cx=step1.cx, cy=step1.cy, K1=K1, K2=K2
    )
    per_image = []
    for o, pose in zip(observations, step1.poses):
        proj = project_center_view(
            o.board_xy, pose, step1.fx, step1.fy, step1.cx, step1.cy, step1.dist
        )
        per_image.append(float(np.sqrt(((proj - o.image_xy) ** 2).sum(axis=1).mean())))
    law = np.abs(K2 / np.asarray(depths) + K1 + np.asarray(lams))
    return CalibrationResult(
        intrinsics=intr,
        dist=step1.dist,
        poses=step1.poses,
        rms_reprojection=step1.rms_reprojection,
        per_image_rms=per_image,
        k1k2_residual=resid,
        disparity_rms=float(np.sqrt((law**2).mean())),
        step2_ls_diagnostic=ls_diag,
        n_corners=len(depths),
        notes=notes,
    )


# ---------------------------------------------------------------------------
# Result file


def save_calibration(path: str | Path, result: CalibrationResult) -> None:
    intr = result.intrinsics
    payload = {
        "fx": intr.fx,
        "fy": intr.fy,
        "cx": intr.cx,
        "cy": intr.cy,
        "k1": result.dist.k1,
        "k2_dist": result.dist.k2,
        "p1": result.dist.p1,
        "p2": result.dist.p2,
        "K1": intr.K1,
        "K2": intr.K2,
        "images": [
            {"R": pose.R.reshape(-1).tolist(), "T": pose.t.tolist()}
            for pose in result.poses
        ],
        "residuals": {
            "rms_reprojection_px": result.rms_reprojection,
            "per_image_rms_px": result.per_image_rms,
            "k1k2_residual": result.k1k2_residual,
            "disparity_rms": result.disparity_rms,
            "step2_ls_diagnostic": {
                "K1": result.step2_ls_diagnostic[0],
                "K2": result.step2_ls_diagnostic[1],
            },
            "n_corners": result.n_corners,
        },
        "notes": result.notes,
    }
    if result.config_hash:
        payload["config_hash"] = result.config_hash
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_calibration(path: str | Path) -> CalibrationResult:
    path = Path(path)
    if not path.exists():
        raise InputError(f"calibration file not found: {path}")
    data = json.loads(path.read_text())
    intr = LightFieldIntrinsics(
        fx=data["fx"], fy=data["fy"], cx=data["cx"], cy=data["cy"],
        K1=data["K1"], K2=data["K2"],
    )
    res = data.get("residuals", {})
    diag = res.get("step2_ls_diagnostic", {"K1": 0.0, "K2": 0.0})
    return CalibrationResult(
        intrinsics=intr,
        dist=DistortionCoeffs(
            k1=data["k1"], k2=data["k2_dist"], p1=data["p1"], p2=data["p2"]
        ),
        poses=[
            Pose(np.array(img["R"]).reshape(3, 3), np.array(img["T"]))
            for img in data["images"]
        ],
        rms_reprojection=res.get("rms_reprojection_px", float("nan")),
        per_image_rms=res.get("per_image_rms_px", []),
        k1k2_residual=res.get("k1k2_residual", float("nan")),
        disparity_rms=res.get("disparity_rms", float("nan")),
        step2_ls_diagnostic=(diag["K1"], diag["K2"]),
        n_corners=res.get("n_corners", 0),
        config_hash=data.get("config_hash"),
    )
