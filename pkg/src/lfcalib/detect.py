"""Checkerboard corner detection on raw light-field data.

A corner is recovered as an "LF-point" (centre-view position plus
disparity) by intersecting the light-field descriptions of the two board
segments meeting at it.  Each segment is an "LF-line": two endpoint
LF-points whose abscissae are pinned to coarse corner estimates, leaving
four free parameters.  The free parameters are found by maximizing the
summed normalized cross-correlation between edge-step templates and the
raw sub-images the segment crosses — one 2D template per sub-image, all
of them consistent with a single 3D line, which is what makes the search
use the full 4D data instead of treating sub-images independently.

Geometry used throughout: a point (x, y, lam) appears inside the
sub-image centred at c at local offset (c - (x, y)) / lam, so a 3D
segment traces a straight 2D line in every sub-image, obtainable as the
cross product of the homogeneous endpoint images
[c_x - x_k, c_y - y_k, lam_k].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DetectionError, EstimationError, GeometryError, InputError
from .geomfit import apply_homography, homography_dlt, least_singular_vector
from .model import LFPoint
from .raw import MicroLensGrid, RawImage, SubImage, bilinear_sample, center_view_image, default_subimage_radius
from .render import CheckerboardSpec

__all__ = [
    "DetectorConfig",
    "LFLine",
    "PlaneCoeffs",
    "Template4D",
    "DetectedBoard",
    "RefineResult",
    "classify_orientation",
    "slice_line",
    "make_template",
    "total_ncc",
    "planes_through_lf_points",
    "intersect_lf_lines",
    "detect_saddle_corners",
    "order_corner_grid",
    "initial_lf_line",
    "refine_lf_line",
    "detect_board",
    "write_corner_file",
    "read_corner_file",
]

_EPS = 1e-12


@dataclass(frozen=True)
class DetectorConfig:
    """Tuning knobs of the detector; defaults match the documented
    algorithm (strip width, sweep range, pattern-search schedule)."""

    strip_halfwidth_pitches: float = 1.5
    sweep_lambda_min: float = -1.2
    sweep_lambda_max: float = 1.2
    sweep_lambda_step: float = 0.05
    step_position: float = 0.5
    step_disparity: float = 0.05
    contraction: float = 0.5
    tol_position: float = 1e-3
    tol_disparity: float = 1e-4
    max_iterations: int = 200
    ramp_width: float = 1.0
    residual_threshold: float = 0.02
    min_strip_subimages: int = 2
    saddle_smooth_sigma: float = 0.8
    max_corner_candidates_factor: float = 1.7
    # along-line clearance (px) kept between a sub-image and the nearest
    # board-cell boundary; None picks the sub-image radius plus one pixel
    cell_boundary_margin: float | None = None
    # half-range and step of the final frozen-position disparity refit
    disparity_refit_range: float = 0.06
    disparity_refit_step: float = 0.0025
    # sample spacing (px) of the correlation windows on the sub-image disc
    window_step: float = 1.0
    # a polished segment is rejected when its mean NCC over the
    # sub-images its line crosses falls below this (flat/occluded strips)
    min_mean_ncc: float = 0.3


@dataclass(frozen=True)
class LFLine:
    """Light-field description of a 3D board segment.

    For a horizontal line the endpoint x coordinates are pinned
    (``fixed``) and the free parameters are [y1, lam1, y2, lam2]; a
    vertical line pins y and frees [x1, lam1, x2, lam2].
    """

    orientation: str
    fixed: tuple[float, float]
    params: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        if self.orientation not in ("horizontal", "vertical"):
            raise InputError(f"unknown orientation {self.orientation!r}")

    def endpoints(self) -> tuple[LFPoint, LFPoint]:
        a, la, b, lb = self.params
        if self.orientation == "horizontal":
            return LFPoint(self.fixed[0], a, la), LFPoint(self.fixed[1], b, lb)
        return LFPoint(a, self.fixed[0], la), LFPoint(b, self.fixed[1], lb)

    def with_params(self, params) -> "LFLine":
        return replace(self, params=tuple(float(v) for v in params))


def classify_orientation(p1: tuple[float, float], p2: tuple[float, float]) -> str:
    """'horizontal' when the segment makes at most 45 degrees with the
    image x axis (ties horizontal), 'vertical' otherwise."""
    dx = p2[0] - p1[0]
    dy = p2[1] - p1[1]
    if dx == 0.0 and dy == 0.0:
        raise GeometryError("cannot orient a segment with coincident endpoints")
    return "horizontal" if abs(dy) <= abs(dx) else "vertical"


# ---------------------------------------------------------------------------
# Slicing and templates


def _sliced_line_raw(p1: LFPoint, p2: LFPoint, sub_center) -> tuple[float, float, float]:
    """Unnormalized 2D line (local offset coordinates) traced by the
    segment inside the sub-image centred at ``sub_center``."""
    a1 = sub_center[0] - p1.x
    b1 = sub_center[1] - p1.y
    a2 = sub_center[0] - p2.x
    b2 = sub_center[1] - p2.y
    return (
        b1 * p2.lam - p1.lam * b2,
        p1.lam * a2 - a1 * p2.lam,
        a1 * b2 - b1 * a2,
    )


def slice_line(line: LFLine, sub_center: tuple[float, float]) -> tuple[float, float, float]:
    """2D line coefficients (l_a, l_b, l_c), with l_a^2 + l_b^2 = 1, of
    the segment's image in the sub-image centred at ``sub_center``; the
    line is expressed in local offset coordinates relative to the centre.
    Raises :class:`DetectionError` when the endpoint images coincide."""
    p1, p2 = line.endpoints()
    la, lb, lc = _sliced_line_raw(p1, p2, sub_center)
    nrm = math.hypot(la, lb)
    if nrm < _EPS * max(1.0, abs(lc)):
        raise DetectionError("degenerate slice: endpoint images coincide")
    return la / nrm, lb / nrm, lc / nrm


def make_template(
    line2d: tuple[float, float, float],
    sub: SubImage,
    polarity: float,
    ramp_width: float = 1.0,
) -> np.ndarray | None:
    """Edge-step template on the sub-image disc: ``polarity`` on the
    positive side of the line, ``-polarity`` on the other, with a linear
    ramp of ``ramp_width`` px, mean-subtracted inside the circular mask.
    Returns None when the line misses the disc entirely."""
    la, lb, lc = line2d
    nrm = math.hypot(la, lb)
    if nrm < _EPS:
        return None
    la, lb, lc = la / nrm, lb / nrm, lc / nrm
    if abs(lc) > sub.radius + 0.5 * ramp_width:
        return None
    off = sub.offsets()
    d = la * off[:, 0] + lb * off[:, 1] + lc
    t = polarity * np.clip(2.0 * d / ramp_width, -1.0, 1.0)
    return t - t.mean()


@dataclass(frozen=True)
class Template4D:
    """Per-sub-image 2D templates covering a detection strip, paired with
    the sub-image centres they correlate against."""

    centers: np.ndarray  # (K, 2)
    templates: tuple  # K entries: np.ndarray or None
    offsets: np.ndarray  # (P, 2) shared disc lattice


def total_ncc(template: Template4D, raw: RawImage) -> float:
    """Sum of zero-normalized cross-correlations of each 2D template with
    the co-located raw window.  Empty templates and flat raw windows
    contribute 0; every term lies in [-1, 1]."""
    total = 0.0
    off = template.offsets
    h, w = raw.pixels.shape
    for center, t in zip(template.centers, template.templates):
        if t is None:
            continue
        r = math.ceil(np.abs(off).max())
        if not (r <= center[0] <= w - 1 - r and r <= center[1] <= h - 1 - r):
            raise InputError("template window falls outside the sensor")
        win = bilinear_sample(raw.pixels, center[0] + off[:, 0], center[1] + off[:, 1])
        wc = win - win.mean()
        wn = math.sqrt(float(wc @ wc))
        tn = math.sqrt(float(t @ t))
        if wn < 1e-9 or tn < 1e-9:
            continue
        total += float(t @ wc) / (tn * wn)
    return total


# ---------------------------------------------------------------------------
# Strip matcher: the fast evaluator behind the sweep and the refinement


class _StripMatcher:
    """Precomputed raw windows for the sub-images a board line crosses.

    The line may span several board cells (collinear segments share one
    3D line); the edge polarity alternates cell by cell, so each
    sub-image carries the bright-side reference point of the cell it
    projects onto.  Windows are sampled once; each score evaluation only
    rebuilds the cheap analytic templates.
    """

    def __init__(
        self,
        raw: RawImage,
        grid: MicroLensGrid,
        p_start: np.ndarray,
        p_end: np.ndarray,
        cv: np.ndarray,
        cfg: DetectorConfig,
        n_cells: int = 1,
    ) -> None:
        self.cfg = cfg
        self.radius = default_subimage_radius(grid.pitch)
        centers = grid.centers().reshape(-1, 2)
        p_start = np.asarray(p_start, dtype=np.float64)
        p_end = np.asarray(p_end, dtype=np.float64)
        seg = p_end - p_start
        seg_len2 = float(seg @ seg)
        if seg_len2 < _EPS:
            raise DetectionError("segment endpoints coincide")
        tpar = ((centers - p_start) @ seg) / seg_len2
        perp = centers - (p_start + tpar[:, None] * seg)
        dist = np.sqrt((perp**2).sum(axis=1))
        keep = (tpar >= 0.0) & (tpar <= 1.0) & (dist <= cfg.strip_halfwidth_pitches * grid.pitch)
        r = int(math.floor(self.radius))
        h, w = raw.pixels.shape
        keep &= (
            (centers[:, 0] >= r)
            & (centers[:, 0] <= w - 1 - r)
            & (centers[:, 1] >= r)
            & (centers[:, 1] <= h - 1 - r)
        )
        # sub-images whose footprint may straddle a board corner see a
        # polarity flip the straight-edge template cannot represent; drop
        # everything too close (along the line) to a cell boundary
        margin = cfg.cell_boundary_margin
        if margin is None:
            margin = self.radius + 1.0
        if margin > 0.0:
            seg_len = math.sqrt(seg_len2)
            cellpos = tpar * n_cells
            boundary_dist = np.abs(cellpos - np.round(cellpos)) * (seg_len / n_cells)
            keep &= boundary_dist > margin
        if int(keep.sum()) < cfg.min_strip_subimages:
            raise DetectionError(
                f"segment strip covers {int(keep.sum())} sub-images, "
                f"need {cfg.min_strip_subimages}"
            )
        self.centers = centers[keep]
        step = cfg.window_step
        axis = np.arange(-r, r + 0.5 * step, step)
        dx, dy = np.meshgrid(axis, axis)
        disc = dx**2 + dy**2 <= self.radius**2
        self.ox = dx[disc].astype(np.float64)
        self.oy = dy[disc].astype(np.float64)
        win = bilinear_sample(
            raw.pixels,
            self.centers[:, 0:1] + self.ox[None, :],
            self.centers[:, 1:2] + self.oy[None, :],
        )
        self.Wc = win - win.mean(axis=1, keepdims=True)
        self.Wn = np.sqrt((self.Wc**2).sum(axis=1))

        # per-cell bright side: centre-view samples on both sides of every
        # cell midpoint, reconciled with the forced alternation
        nvec = np.array([-seg[1], seg[0]]) / math.sqrt(seg_len2)
        cell_len = math.sqrt(seg_len2) / n_cells
        delta = 0.35 * cell_len
        votes = []
        mids = []
        c, s = math.cos(-grid.rotation), math.sin(-grid.rotation)
        for k in range(n_cells):
            mid = p_start + ((k + 0.5) / n_cells) * seg
            mids.append(mid)
            vals = []
            for sgn in (1.0, -1.0):
                q = mid + sgn * delta * nvec
                lx = (q[0] - grid.origin[0]) / grid.pitch
                ly = (q[1] - grid.origin[1]) / grid.pitch
                vals.append(float(bilinear_sample(cv, c * lx - s * ly, s * lx + c * ly)))
            votes.append(math.copysign(1.0, vals[0] - vals[1]) if vals[0] != vals[1] else 0.0)
        alternation = sum(v * (-1.0) ** k for k, v in enumerate(votes))
        if alternation == 0.0:
            raise DetectionError("no contrast across the segment")
        s0 = math.copysign(1.0, alternation)
        cell_idx = np.clip((tpar[keep] * n_cells).astype(np.int64), 0, n_cells - 1)
        signs = s0 * (-1.0) ** cell_idx
        self.bright = np.asarray(mids)[cell_idx] + signs[:, None] * delta * nvec[None, :]

    def score_endpoints(self, x1, y1, lam1, x2, y2, lam2) -> float:
        cx = self.centers[:, 0]
        cy = self.centers[:, 1]
        a1 = cx - x1
        b1 = cy - y1
        a2 = cx - x2
        b2 = cy - y2
        la = b1 * lam2 - lam1 * b2
        lb = lam1 * a2 - a1 * lam2
        lc = a1 * b2 - b1 * a2
        nrm = np.hypot(la, lb)
        ok = nrm > _EPS * np.maximum(1.0, np.abs(lc))
        nrm_safe = np.where(ok, nrm, 1.0)
        la = la / nrm_safe
        lb = lb / nrm_safe
        lc = lc / nrm_safe
        lam_mid = 0.5 * (lam1 + lam2)
        if abs(lam_mid) < 1e-9:
            return 0.0
        side = la * (cx - self.bright[:, 0]) + lb * (cy - self.bright[:, 1]) + lc * lam_mid
        sign = np.sign(side) * np.sign(lam_mid)
        d = la[:, None] * self.ox[None, :] + lb[:, None] * self.oy[None, :] + lc[:, None]
        t = sign[:, None] * np.clip(2.0 * d / self.cfg.ramp_width, -1.0, 1.0)
        tc = t - t.mean(axis=1, keepdims=True)
        tn = np.sqrt((tc**2).sum(axis=1))
        num = (tc * self.Wc).sum(axis=1)
        ok = ok & (tn > 1e-9) & (self.Wn > 1e-9) & (sign != 0.0)
        denom = np.where(ok, tn * self.Wn, 1.0)
        return float(np.where(ok, num / denom, 0.0).sum())

    def score_params_batch(self, line: LFLine, params: np.ndarray) -> np.ndarray:
        """Scores for a (C, 4) batch of free-parameter vectors."""
        params = np.asarray(params, dtype=np.float64)
        out = np.empty(len(params))
        fixed = line.fixed
        horizontal = line.orientation == "horizontal"
        chunk = 512
        cx = self.centers[:, 0]
        cy = self.centers[:, 1]
        for lo in range(0, len(params), chunk):
            p = params[lo : lo + chunk]
            if horizontal:
                x1 = np.full(len(p), fixed[0])
                y1 = p[:, 0]
                x2 = np.full(len(p), fixed[1])
                y2 = p[:, 2]
            else:
                y1 = np.full(len(p), fixed[0])
                x1 = p[:, 0]
                y2 = np.full(len(p), fixed[1])
                x2 = p[:, 2]
            lam1 = p[:, 1]
            lam2 = p[:, 3]
            a1 = cx[None, :] - x1[:, None]
            b1 = cy[None, :] - y1[:, None]
            a2 = cx[None, :] - x2[:, None]
            b2 = cy[None, :] - y2[:, None]
            la = b1 * lam2[:, None] - lam1[:, None] * b2
            lb = lam1[:, None] * a2 - a1 * lam2[:, None]
            lc = a1 * b2 - b1 * a2
            nrm = np.hypot(la, lb)
            ok = nrm > _EPS * np.maximum(1.0, np.abs(lc))
            nrm_safe = np.where(ok, nrm, 1.0)
            la, lb, lc = la / nrm_safe, lb / nrm_safe, lc / nrm_safe
            lam_mid = 0.5 * (lam1 + lam2)
            side = (
                la * (cx[None, :] - self.bright[None, :, 0])
                + lb * (cy[None, :] - self.bright[None, :, 1])
                + lc * lam_mid[:, None]
            )
            sign = np.sign(side) * np.sign(lam_mid)[:, None]
            d = (
                la[..., None] * self.ox[None, None, :]
                + lb[..., None] * self.oy[None, None, :]
                + lc[..., None]
            )
            t = sign[..., None] * np.clip(2.0 * d / self.cfg.ramp_width, -1.0, 1.0)
            tc = t - t.mean(axis=2, keepdims=True)
            tn = np.sqrt((tc**2).sum(axis=2))
            num = (tc * self.Wc[None, :, :]).sum(axis=2)
            okk = ok & (tn > 1e-9) & (self.Wn[None, :] > 1e-9) & (sign != 0.0)
            okk &= (np.abs(lam_mid) > 1e-9)[:, None]
            denom = np.where(okk, tn * self.Wn[None, :], 1.0)
            out[lo : lo + chunk] = np.where(okk, num / denom, 0.0).sum(axis=1)
        return out

    def score_line(self, line: LFLine) -> float:
        p1, p2 = line.endpoints()
        return self.score_endpoints(p1.x, p1.y, p1.lam, p2.x, p2.y, p2.lam)

    def mean_active_ncc(self, line: LFLine) -> float:
        """Average NCC over the sub-images whose disc the sliced line
        actually crosses (a low value means the strip does not support
        the line: flat, occluded, or mispredicted)."""
        p1, p2 = line.endpoints()
        total = 0.0
        active = 0
        for c in self.centers:
            la, lb, lc = _sliced_line_raw(p1, p2, c)
            nrm = math.hypot(la, lb)
            if nrm < _EPS * max(1.0, abs(lc)):
                continue
            if abs(lc / nrm) > self.radius:
                continue
            active += 1
        if active == 0:
            return 0.0
        return self.score_line(line) / active

    def template4d(self, line: LFLine) -> Template4D:
        """Materialize the current strip templates (for the public
        :func:`total_ncc` path and inspection)."""
        p1, p2 = line.endpoints()
        lam_mid = 0.5 * (p1.lam + p2.lam)
        templates = []
        offsets = np.stack([self.ox, self.oy], axis=-1)
        for c, bright in zip(self.centers, self.bright):
            la, lb, lc = _sliced_line_raw(p1, p2, c)
            nrm = math.hypot(la, lb)
            if nrm < _EPS * max(1.0, abs(lc)) or abs(lam_mid) < 1e-9:
                templates.append(None)
                continue
            la, lb, lc = la / nrm, lb / nrm, lc / nrm
            side = la * (c[0] - bright[0]) + lb * (c[1] - bright[1]) + lc * lam_mid
            sign = math.copysign(1.0, side) * math.copysign(1.0, lam_mid)
            d = la * self.ox + lb * self.oy + lc
            t = sign * np.clip(2.0 * d / self.cfg.ramp_width, -1.0, 1.0)
            if np.ptp(t) < 1e-12:
                templates.append(None)
                continue
            templates.append(t - t.mean())
        return Template4D(centers=self.centers.copy(), templates=tuple(templates), offsets=offsets)


# ---------------------------------------------------------------------------
# Pattern search


def _pattern_search(score, x0, steps0, tols, cfg: DetectorConfig):
    x = np.asarray(x0, dtype=np.float64).copy()
    best = score(x)
    trace = [best]
    steps = np.asarray(steps0, dtype=np.float64).copy()
    tols = np.asarray(tols, dtype=np.float64)
    improved_ever = False
    for _ in range(cfg.max_iterations):
        improved = False
        for axis in range(x.size):
            for sgn in (1.0, -1.0):
                cand = x.copy()
                cand[axis] += sgn * steps[axis]
                val = score(cand)
                if val > best:
                    x, best = cand, val
                    trace.append(best)
                    improved = True
                    improved_ever = True
                    break
        if not improved:
            steps *= cfg.contraction
            if np.all(steps < tols):
                break
    return x, best, np.asarray(trace), improved_ever


@dataclass(frozen=True)
class RefineResult:
    line: LFLine
    score: float
    trace: np.ndarray
    improved: bool
    warning: str | None = None


def _segment_matcher(raw, grid, line: LFLine, cv, cfg, n_cells: int = 1) -> _StripMatcher:
    p1, p2 = line.endpoints()
    if cv is None:
        cv = center_view_image(raw, grid)
    return _StripMatcher(
        raw,
        grid,
        np.array([p1.x, p1.y]),
        np.array([p2.x, p2.y]),
        cv,
        cfg,
        n_cells=n_cells,
    )


def _line_from_corners(p1, p2) -> LFLine:
    orientation = classify_orientation(tuple(p1), tuple(p2))
    if orientation == "horizontal":
        return LFLine(orientation, (float(p1[0]), float(p2[0])), (float(p1[1]), 0.0, float(p2[1]), 0.0))
    return LFLine(orientation, (float(p1[1]), float(p2[1])), (float(p1[0]), 0.0, float(p2[0]), 0.0))


def initial_lf_line(
    raw: RawImage,
    grid: MicroLensGrid,
    corner_a: tuple[float, float],
    corner_b: tuple[float, float],
    cfg: DetectorConfig = DetectorConfig(),
    n_cells: int = 1,
    cv=None,
) -> tuple[LFLine, str | None]:
    """Initial LF-line between two coarse corner estimates: endpoint
    positions from the coarse corners, shared disparity from a 1D sweep
    maximizing the strip's total NCC.  Returns the line and an optional
    warning ('sweep maximum at boundary', 'flat strip')."""
    line = _line_from_corners(corner_a, corner_b)
    matcher = _segment_matcher(raw, grid, line, cv, cfg, n_cells=n_cells)
    line, warning = _sweep_disparity(matcher, line, cfg)
    return line, warning


def _sweep_disparity(matcher: _StripMatcher, line: LFLine, cfg: DetectorConfig):
    lams = np.arange(
        cfg.sweep_lambda_min, cfg.sweep_lambda_max + 0.5 * cfg.sweep_lambda_step, cfg.sweep_lambda_step
    )
    cand = np.tile(np.asarray(line.params), (len(lams), 1))
    cand[:, 1] = lams
    cand[:, 3] = lams
    scores = matcher.score_params_batch(line, cand)
    k = int(np.argmax(scores))
    warning = None
    if scores[k] <= 1e-9:
        raise DetectionError("flat strip: disparity sweep found no signal")
    if k in (0, len(lams) - 1):
        warning = "sweep maximum at boundary: disparity range too small"
    p = list(line.params)
    p[1] = p[3] = float(lams[k])
    return line.with_params(p), warning


def refine_lf_line(
    init: LFLine,
    raw: RawImage,
    grid: MicroLensGrid,
    cfg: DetectorConfig = DetectorConfig(),
    n_cells: int = 1,
    cv=None,
) -> RefineResult:
    """Maximize the total NCC over the line's 4 free parameters by
    derivative-free pattern search.  The returned score never falls below
    the initial score; a non-improving start is flagged."""
    matcher = _segment_matcher(raw, grid, init, cv, cfg, n_cells=n_cells)
    steps = [cfg.step_position, cfg.step_disparity, cfg.step_position, cfg.step_disparity]
    tols = [cfg.tol_position, cfg.tol_disparity, cfg.tol_position, cfg.tol_disparity]

    def score(params):
        return matcher.score_line(init.with_params(params))

    x, best, trace, improved = _pattern_search(score, init.params, steps, tols, cfg)
    line = init.with_params(x)
    warning = None if improved else "no improvement from initial parameters"
    return RefineResult(line=line, score=best, trace=trace, improved=improved, warning=warning)


# ---------------------------------------------------------------------------
# Intersection of LF-lines


@dataclass(frozen=True)
class PlaneCoeffs:
    """Unit-norm homogeneous plane in (x, y, lam) space."""

    a: float
    b: float
    c: float
    d: float


def planes_through_lf_points(p1: LFPoint, p2: LFPoint, origin=(0.0, 0.0)) -> tuple[PlaneCoeffs, PlaneCoeffs]:
    """Orthonormal basis of the pencil of planes through two LF-points
    (the 2D null space of the 2x4 incidence system)."""
    M = np.array(
        [
            [p1.x - origin[0], p1.y - origin[1], p1.lam, 1.0],
            [p2.x - origin[0], p2.y - origin[1], p2.lam, 1.0],
        ]
    )
    _, sv, Vt = np.linalg.svd(M)
    if sv[1] < 1e-12 * max(sv[0], 1.0):
        raise GeometryError("coincident LF-points do not define a line")
    return PlaneCoeffs(*Vt[2]), PlaneCoeffs(*Vt[3])


def intersect_lf_lines(
    line_v: LFLine,
    line_h: LFLine,
    residual_threshold: float | None = None,
) -> tuple[LFPoint, float]:
    """Intersect two LF-lines in (x, y, lam) space.

    Each line contributes the two planes spanning its incidence null
    space; the four stacked plane rows are solved for their common point
    by SVD, and the least singular value of the stack is reported as the
    intersection residual.  Coordinates are centred internally for
    conditioning only; the solution is mapped back.
    """
    pv1, pv2 = line_v.endpoints()
    ph1, ph2 = line_h.endpoints()
    ox = (pv1.x + pv2.x + ph1.x + ph2.x) / 4.0
    oy = (pv1.y + pv2.y + ph1.y + ph2.y) / 4.0
    rows = []
    for a, b in ((pv1, pv2), (ph1, ph2)):
        for plane in planes_through_lf_points(a, b, origin=(ox, oy)):
            rows.append([plane.a, plane.b, plane.c, plane.d])
    A = np.asarray(rows)
    q, sigma_min, sv = least_singular_vector(A)
    if sv[-2] < 1e-9 * max(sv[0], 1.0):
        raise DetectionError("lines are inconsistent: intersection is not unique")
    if abs(q[3]) < 1e-12:
        raise GeometryError("lines intersect at infinity")
    x, y, lam = q[0] / q[3], q[1] / q[3], q[2] / q[3]
    if residual_threshold is not None and sigma_min > residual_threshold:
        raise DetectionError(
            f"intersection residual {sigma_min:.3g} exceeds {residual_threshold:.3g}"
        )
    return LFPoint(x + ox, y + oy, lam), float(sigma_min)


# ---------------------------------------------------------------------------
# Coarse corners on the centre view


def detect_saddle_corners(
    image: np.ndarray,
    max_corners: int,
    smooth_sigma: float = 0.8,
    rel_strength: float = 0.05,
):
    """Checkerboard corners as saddle points of the (smoothed) intensity:
    local minima of the Hessian determinant, sub-pixel refined by a
    quadratic fit.  Returns (positions (N, 2) as (x, y), strengths),
    strongest first."""
    from scipy.ndimage import gaussian_filter, minimum_filter

    img = gaussian_filter(np.asarray(image, dtype=np.float64), smooth_sigma)
    gy, gx = np.gradient(img)
    gyy, gyx = np.gradient(gy)
    gxy, gxx = np.gradient(gx)
    S = gxx * gyy - gxy * gyx
    local_min = minimum_filter(S, size=5, mode="nearest")
    cand = (S <= local_min) & (S < 0.0)
    cand[:2, :] = cand[-2:, :] = False
    cand[:, :2] = cand[:, -2:] = False
    ys, xs = np.nonzero(cand)
    if len(xs) == 0:
        raise DetectionError("no saddle points found")
    strengths = -S[ys, xs]
    keep = strengths >= rel_strength * strengths.max()
    ys, xs, strengths = ys[keep], xs[keep], strengths[keep]
    order = np.argsort(-strengths)
    # suppress plateau duplicates: greedily keep the strongest candidate
    # of any cluster closer than 2 px
    kept = []
    for k in order:
        if all((xs[k] - xs[m]) ** 2 + (ys[k] - ys[m]) ** 2 >= 4.0 for m in kept):
            kept.append(k)
        if len(kept) >= max_corners:
            break
    ys, xs, strengths = ys[kept], xs[kept], strengths[kept]
    out = []
    for y, x in zip(ys, xs):
        patch = S[y - 1 : y + 2, x - 1 : x + 2]
        dx = 0.5 * (patch[1, 2] - patch[1, 0])
        dy = 0.5 * (patch[2, 1] - patch[0, 1])
        dxx = patch[1, 2] - 2 * patch[1, 1] + patch[1, 0]
        dyy = patch[2, 1] - 2 * patch[1, 1] + patch[0, 1]
        dxy = 0.25 * (patch[2, 2] - patch[2, 0] - patch[0, 2] + patch[0, 0])
        det = dxx * dyy - dxy * dxy
        if abs(det) < _EPS:
            out.append((float(x), float(y)))
            continue
        ox = -(dyy * dx - dxy * dy) / det
        oy = -(dxx * dy - dxy * dx) / det
        if abs(ox) > 1.0 or abs(oy) > 1.0:
            ox = oy = 0.0
        out.append((x + ox, y + oy))
    return np.asarray(out, dtype=np.float64), strengths


def _initial_basis(points: np.ndarray, anchor_idx: int):
    """Two shortest non-collinear displacements from the anchor to its
    neighbours: the starting lattice basis."""
    d = points - points[anchor_idx]
    dist = np.sqrt((d**2).sum(axis=1))
    order = np.argsort(dist)
    a1 = None
    for k in order[1:]:
        a1 = d[k]
        break
    if a1 is None:
        raise DetectionError("not enough corners to build a lattice basis")
    for k in order[1:]:
        v = d[k]
        cross = a1[0] * v[1] - a1[1] * v[0]
        if abs(cross) > 0.5 * np.linalg.norm(a1) * np.linalg.norm(v):
            return a1, v
    raise DetectionError("corner candidates are collinear")


def order_corner_grid(
    points: np.ndarray,
    strengths: np.ndarray,
    rows: int,
    cols: int,
):
    """Assign detected corner candidates to board topology.

    Grows integer lattice labels outward from a central anchor, then
    iteratively re-fits a homography (exact for a planar board) from
    labels to positions and snaps remaining candidates.  The (rows x
    cols) index window maximizing matched strength wins; axes are
    oriented so that column index increases along image +x and row index
    along image +y.

    Returns (grid (rows, cols, 2) with NaN holes, found mask).
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 4:
        raise DetectionError(f"only {n} corner candidates, need at least 4")
    # anchor and lattice basis come from the strongest candidates only;
    # weak artifacts (pattern-boundary junctions, ringing) still get
    # labelled afterwards but cannot derail the geometry
    strong = np.argsort(-np.asarray(strengths))[: rows * cols]
    centroid = points[strong].mean(axis=0)
    anchor = int(strong[np.argmin(((points[strong] - centroid) ** 2).sum(axis=1))])
    a1, a2 = _initial_basis(points[strong], int(np.nonzero(strong == anchor)[0][0]))
    B = np.stack([a1, a2], axis=1)  # columns: basis vectors

    labels = {anchor: (0, 0)}
    spacing = min(np.linalg.norm(a1), np.linalg.norm(a2))
    tol = 0.35 * spacing

    def predict(base_pos, dm, dn, basis):
        return base_pos + basis @ np.array([dm, dn], dtype=np.float64)

    frontier = [anchor]
    unl = set(range(n)) - {anchor}
    while frontier:
        k = frontier.pop()
        m, nn = labels[k]
        for dm, dn in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            target = (m + dm, nn + dn)
            if target in labels.values():
                continue
            pred = predict(points[k], dm, dn, B)
            if not unl:
                break
            cand = min(unl, key=lambda idx: ((points[idx] - pred) ** 2).sum())
            if np.linalg.norm(points[cand] - pred) <= tol:
                labels[cand] = target
                unl.discard(cand)
                frontier.append(cand)

    # homography refinement passes: predict every node adjacent to the
    # labelled set and snap unmatched candidates
    for _ in range(4):
        if len(labels) < 6:
            break
        lat = np.array([labels[k] for k in labels], dtype=np.float64)
        pos = np.array([points[k] for k in labels])
        try:
            H = homography_dlt(lat[:, ::-1], pos)  # (n, m) -> (x, y)
        except Exception:
            break
        grew = False
        taken = set(labels.values())
        for (m, nn) in list(taken):
            for dm, dn in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                tgt = (m + dm, nn + dn)
                if tgt in taken or not unl:
                    continue
                pred = apply_homography(H, np.array([[tgt[1], tgt[0]]]))[0]
                cand = min(unl, key=lambda idx: ((points[idx] - pred) ** 2).sum())
                if np.linalg.norm(points[cand] - pred) <= tol:
                    labels[cand] = tgt
                    taken.add(tgt)
                    unl.discard(cand)
                    grew = True
        if not grew:
            break

    if len(labels) < 4:
        raise DetectionError("could not propagate board topology")

    idx = np.array(list(labels.keys()))
    lat = np.array([labels[k] for k in idx])
    stren = strengths[idx]

    # choose the (rows x cols) index window (in either axis order) with
    # maximal matched strength; ranges allow partially visible boards
    best = None
    for (wr, wc), transposed in (((rows, cols), False), ((cols, rows), True)):
        for m0 in range(int(lat[:, 0].min()) - wr + 1, int(lat[:, 0].max()) + 2):
            for n0 in range(int(lat[:, 1].min()) - wc + 1, int(lat[:, 1].max()) + 2):
                inside = (
                    (lat[:, 0] >= m0)
                    & (lat[:, 0] < m0 + wr)
                    & (lat[:, 1] >= n0)
                    & (lat[:, 1] < n0 + wc)
                )
                score = stren[inside].sum()
                if best is None or score > best[0]:
                    best = (score, m0, n0, transposed)
    _, m0, n0, transposed = best

    grid = np.full((rows, cols, 2), np.nan)
    found = np.zeros((rows, cols), dtype=bool)
    wr, wc = (cols, rows) if transposed else (rows, cols)
    for k, (m, nn) in zip(idx, lat):
        im, jn = m - m0, nn - n0
        if not (0 <= im < wr and 0 <= jn < wc):
            continue
        i, j = (jn, im) if transposed else (im, jn)
        grid[i, j] = points[k]
        found[i, j] = True

    if found.sum() < 4:
        raise DetectionError("board topology window matched too few corners")

    def axis_dir(g, f, axis):
        if axis == 1:
            a, b, fa, fb = g[:, :-1], g[:, 1:], f[:, :-1], f[:, 1:]
        else:
            a, b, fa, fb = g[:-1, :], g[1:, :], f[:-1, :], f[1:, :]
        ok = fa & fb
        if not ok.any():
            return np.zeros(2)
        return (b - a)[ok].mean(axis=0)

    # canonical orientation: j increases along image +x, i along +y
    # (transposing is only possible for square boards; otherwise the
    # window shape already fixed the axis assignment)
    jdir = axis_dir(grid, found, axis=1)
    idir = axis_dir(grid, found, axis=0)
    if rows == cols and abs(jdir[0]) < abs(idir[0]):
        grid = np.transpose(grid, (1, 0, 2))
        found = found.T
        jdir, idir = idir, jdir
    if jdir[0] < 0 or (jdir[0] == 0 and jdir[1] < 0):
        grid = grid[:, ::-1]
        found = found[:, ::-1]
    if idir[1] < 0 or (idir[1] == 0 and idir[0] < 0):
        grid = grid[::-1, :]
        found = found[::-1, :]
    return np.ascontiguousarray(grid), np.ascontiguousarray(found)


# ---------------------------------------------------------------------------
# Whole-board detection


@dataclass
class DetectedBoard:
    """Per-corner LF-points for one raw image, with validity mask and the
    intersection residuals that gated it."""

    rows: int
    cols: int
    points: np.ndarray  # (rows, cols, 3): x, y, lam
    valid: np.ndarray  # (rows, cols) bool
    residuals: np.ndarray  # (rows, cols)
    coarse: np.ndarray  # (rows, cols, 2) coarse corner estimates (raw px)
    diagnostics: dict = field(default_factory=dict)

    def corner_list(self) -> list[dict]:
        out = []
        for i in range(self.rows):
            for j in range(self.cols):
                out.append(
                    {
                        "i": i,
                        "j": j,
                        "x": float(self.points[i, j, 0]),
                        "y": float(self.points[i, j, 1]),
                        "lam": float(self.points[i, j, 2]),
                        "residual": float(self.residuals[i, j]),
                        "valid": bool(self.valid[i, j]),
                    }
                )
        return out


def _lens_to_raw(grid: MicroLensGrid, pts: np.ndarray) -> np.ndarray:
    """Fractional lens-index coordinates (x=col, y=row) -> raw pixels."""
    x, y = grid.center(pts[..., 1], pts[..., 0])
    return np.stack([x, y], axis=-1)


def _validate_coarse_corners(cv, lens_grid, found, min_contrast=0.18):
    """Drop ordered corners that lack the four-quadrant checker pattern
    (occluder boundaries and pattern-edge junctions mimic saddles but
    fail this test)."""
    rows, cols = found.shape
    out = found.copy()
    h, w = cv.shape
    for i in range(rows):
        for j in range(cols):
            if not found[i, j]:
                continue
            p = lens_grid[i, j]

            def axis_step(di, dj):
                a = (i + di, j + dj)
                b = (i - di, j - dj)
                pa = lens_grid[a] if 0 <= a[0] < rows and 0 <= a[1] < cols and found[a] else p
                pb = lens_grid[b] if 0 <= b[0] < rows and 0 <= b[1] < cols and found[b] else p
                d = (pa - pb) / 2.0
                return d if np.linalg.norm(d) > 1e-9 else None

            du = axis_step(0, 1)
            dv = axis_step(1, 0)
            if du is None or dv is None:
                out[i, j] = False
                continue
            quads = []
            for su, sv in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
                q = p + 0.3 * (su * du + sv * dv)
                if not (0 <= q[0] <= w - 1 and 0 <= q[1] <= h - 1):
                    quads = None
                    break
                quads.append(float(bilinear_sample(cv, q[0], q[1])))
            if quads is None:
                out[i, j] = False
                continue
            diag_a = 0.5 * (quads[0] + quads[1])
            diag_b = 0.5 * (quads[2] + quads[3])
            mid = 0.5 * (diag_a + diag_b)
            consistent = (quads[0] - mid) * (quads[1] - mid) > 0 and (quads[2] - mid) * (
                quads[3] - mid
            ) > 0
            if not consistent or abs(diag_a - diag_b) < min_contrast:
                out[i, j] = False
    return out


@dataclass(frozen=True)
class _BoardLine:
    """A refined board row/column LF-line and the index span it covers."""

    line: LFLine
    lo: int
    hi: int

    def lf_at_point(self, q) -> LFPoint:
        """LF-point on the line nearest (in the image plane) to a query
        position.  The line is straight in (x, y, lam), so interpolation
        along the image-plane projection parameter is exact."""
        p1, p2 = self.line.endpoints()
        d = np.array([p2.x - p1.x, p2.y - p1.y])
        t = float((np.asarray(q, dtype=np.float64) - (p1.x, p1.y)) @ d / (d @ d))
        return LFPoint(
            p1.x + t * (p2.x - p1.x),
            p1.y + t * (p2.y - p1.y),
            p1.lam + t * (p2.lam - p1.lam),
        )


def detect_board(
    raw: RawImage,
    grid: MicroLensGrid,
    spec: CheckerboardSpec,
    cfg: DetectorConfig = DetectorConfig(),
    collect_traces: bool = False,
) -> DetectedBoard:
    """Detect every board corner in a raw image as an LF-point.

    Coarse corners come from saddle points of the centre view and are
    ordered into board topology.  Each board row and column is refined as
    one LF-line (collinear segments share their 3D line, and the long
    baseline pins the disparity) over the strip of sub-images between its
    outermost visible corners.  Each corner is then locally polished:
    the two short adjacent segments through it are re-optimized in
    position (disparities held from the long lines, so lens distortion
    only has to be accommodated over a single cell) and intersected by
    SVD.  Corners whose intersection residual exceeds the configured
    threshold, or whose lines failed, are masked invalid.
    """
    rows, cols = spec.rows, spec.cols
    cv = center_view_image(raw, grid)
    max_corners = int(cfg.max_corner_candidates_factor * rows * cols) + 8
    pts, strengths = detect_saddle_corners(
        cv, max_corners=max_corners, smooth_sigma=cfg.saddle_smooth_sigma
    )
    lens_grid, found = order_corner_grid(pts, strengths, rows, cols)
    found = _validate_coarse_corners(cv, lens_grid, found)
    if not found.any():
        raise DetectionError("no coarse corner passed the quadrant check")
    coarse = _lens_to_raw(grid, lens_grid)

    traces = [] if collect_traces else None
    warnings: list[str] = []

    def refine_board_line(pa, pb, n_cells):
        line = _line_from_corners(pa, pb)
        matcher = _segment_matcher(raw, grid, line, cv, cfg, n_cells=n_cells)
        line, warning = _sweep_disparity(matcher, line, cfg)
        if warning:
            warnings.append(warning)
        steps = [cfg.step_position, cfg.step_disparity, cfg.step_position, cfg.step_disparity]
        tols = [cfg.tol_position, cfg.tol_disparity, cfg.tol_position, cfg.tol_disparity]
        x = np.asarray(line.params)
        # restart rounds: resetting the step schedule lets the search hop
        # along the curved position/disparity ridge instead of stalling
        best_val = -np.inf
        for _ in range(3):
            x, val, trace, _ = _pattern_search(
                lambda p: matcher.score_line(line.with_params(p)), x, steps, tols, cfg
            )
            if traces is not None:
                traces.append(trace)
            if val <= best_val + 1e-12:
                break
            best_val = val
        refined = line.with_params(x)
        if matcher.mean_active_ncc(refined) < cfg.min_mean_ncc:
            raise DetectionError("board line has no reliable support")
        return refined

    row_lines: dict[int, _BoardLine] = {}
    col_lines: dict[int, _BoardLine] = {}
    for i in range(rows):
        js = np.nonzero(found[i])[0]
        if len(js) >= 2:
            lo, hi = int(js[0]), int(js[-1])
            try:
                row_lines[i] = _BoardLine(
                    refine_board_line(coarse[i, lo], coarse[i, hi], hi - lo), lo, hi
                )
            except DetectionError as exc:
                warnings.append(f"row {i}: {exc}")
    for j in range(cols):
        is_ = np.nonzero(found[:, j])[0]
        if len(is_) >= 2:
            lo, hi = int(is_[0]), int(is_[-1])
            try:
                col_lines[j] = _BoardLine(
                    refine_board_line(coarse[lo, j], coarse[hi, j], hi - lo), lo, hi
                )
            except DetectionError as exc:
                warnings.append(f"column {j}: {exc}")

    points = np.full((rows, cols, 3), np.nan)
    valid = np.zeros((rows, cols), dtype=bool)
    residuals = np.full((rows, cols), np.nan)
    for i in range(rows):
        for j in range(cols):
            rl = row_lines.get(i)
            cl = col_lines.get(j)
            if rl is None or cl is None or not (rl.lo <= j <= rl.hi and cl.lo <= i <= cl.hi):
                continue
            try:
                h_seg, h_matcher = _polish_segment(raw, grid, cv, cfg, coarse, rl, i, j, axis=1)
                v_seg, v_matcher = _polish_segment(raw, grid, cv, cfg, coarse, cl, i, j, axis=0)
                lp, resid = intersect_lf_lines(v_seg, h_seg)
                lam = _refit_disparity(lp, (h_seg, h_matcher), (v_seg, v_matcher), cfg)
                # second pass: positions benefit from the corrected
                # disparity level, the disparity from corrected positions
                h_seg = _reposition_segment(h_seg, h_matcher, lam, lp, cfg)
                v_seg = _reposition_segment(v_seg, v_matcher, lam, lp, cfg)
                lp, resid = intersect_lf_lines(v_seg, h_seg)
                lam = _refit_disparity(lp, (h_seg, h_matcher), (v_seg, v_matcher), cfg)
            except (DetectionError, GeometryError) as exc:
                warnings.append(f"corner ({i},{j}): {exc}")
                continue
            points[i, j] = (lp.x, lp.y, lam)
            residuals[i, j] = resid
            valid[i, j] = resid <= cfg.residual_threshold

    if not valid.any():
        raise DetectionError("no corner produced a valid intersection")

    # plane-consensus pass: flag corners inconsistent with the one-plane
    # model, re-anchor them at the model prediction and re-polish
    board_xy = spec.corner_board_xy()
    h_img, w_img = raw.pixels.shape
    image_center = ((w_img - 1) / 2.0, (h_img - 1) / 2.0)
    consensus = _fit_plane_consensus(points, valid, board_xy, image_center)
    repaired = 0
    if consensus is not None:
        pred_xy, pred_lam, pos_resid, lam_resid = consensus
        pos_scale = max(float(np.nanmedian(pos_resid[valid])) * 4.0, 0.3)
        lam_scale = max(float(np.nanmedian(lam_resid[valid])) * 4.0, 0.008)
        for i in range(rows):
            for j in range(cols):
                inconsistent = valid[i, j] and (
                    pos_resid[i, j] > pos_scale or lam_resid[i, j] > lam_scale
                )
                missing = not valid[i, j] and np.isfinite(pred_xy[i, j, 0]) and found[i, j]
                if not (inconsistent or missing):
                    continue
                try:
                    lp, resid, lam = _repair_corner(
                        raw, grid, cv, cfg, pred_xy, pred_lam, i, j, rows, cols
                    )
                except (DetectionError, GeometryError) as exc:
                    if inconsistent:
                        valid[i, j] = False
                        warnings.append(f"corner ({i},{j}) dropped by consensus: {exc}")
                    continue
                new_pos_resid = math.hypot(lp.x - pred_xy[i, j, 0], lp.y - pred_xy[i, j, 1])
                new_lam_resid = abs(lam - pred_lam[i, j])
                if new_pos_resid <= pos_scale and new_lam_resid <= lam_scale:
                    points[i, j] = (lp.x, lp.y, lam)
                    residuals[i, j] = resid
                    valid[i, j] = resid <= cfg.residual_threshold
                    repaired += 1
                elif inconsistent:
                    valid[i, j] = False
                    warnings.append(f"corner ({i},{j}) inconsistent with board plane")

    # final disparity estimate: one flat board has a two-parameter
    # disparity field (lateral distortion does not touch it), so the
    # per-corner estimates are pooled through that field
    consensus = _fit_plane_consensus(points, valid, board_xy, image_center)
    if consensus is not None:
        _, pred_lam, _, lam_resid = consensus
        ok = valid & (lam_resid < 0.05)
        points[ok, 2] = pred_lam[ok]

    diagnostics = {"warnings": warnings, "repaired": repaired}
    if collect_traces:
        diagnostics["traces"] = traces
    return DetectedBoard(
        rows=rows,
        cols=cols,
        points=points,
        valid=valid,
        residuals=residuals,
        coarse=coarse,
        diagnostics=diagnostics,
    )


def _repair_corner(raw, grid, cv, cfg, pred_xy, pred_lam, i, j, rows, cols):
    """Re-detect one corner from plane-model-predicted anchors."""

    def model_lf(ii, jj):
        return LFPoint(pred_xy[ii, jj, 0], pred_xy[ii, jj, 1], pred_lam[ii, jj])

    jlo, jhi = max(0, j - 1), min(cols - 1, j + 1)
    ilo, ihi = max(0, i - 1), min(rows - 1, i + 1)
    if jhi - jlo < 1 or ihi - ilo < 1:
        raise DetectionError("corner lacks neighbours for repair")
    h_seg, h_matcher = _polish_from_endpoints(
        raw, grid, cv, cfg, model_lf(i, jlo), model_lf(i, jhi), jhi - jlo
    )
    v_seg, v_matcher = _polish_from_endpoints(
        raw, grid, cv, cfg, model_lf(ilo, j), model_lf(ihi, j), ihi - ilo
    )
    lp, resid = intersect_lf_lines(v_seg, h_seg)
    lam = _refit_disparity(lp, (h_seg, h_matcher), (v_seg, v_matcher), cfg)
    return lp, resid, lam


def _polish_segment(raw, grid, cv, cfg, coarse, board_line: _BoardLine, i, j, axis):
    """Short LF-line through corner (i, j) along the given board axis,
    spanning one cell to each side where visible, position-refined with
    disparities pinned from the long line."""
    idx = j if axis == 1 else i
    lo = max(board_line.lo, idx - 1)
    hi = min(board_line.hi, idx + 1)
    if hi - lo < 1:
        raise DetectionError("no adjacent corner along axis")
    q1 = coarse[i, lo] if axis == 1 else coarse[lo, j]
    q2 = coarse[i, hi] if axis == 1 else coarse[hi, j]
    p1 = board_line.lf_at_point(q1)
    p2 = board_line.lf_at_point(q2)
    return _polish_from_endpoints(raw, grid, cv, cfg, p1, p2, hi - lo)


def _polish_from_endpoints(raw, grid, cv, cfg, p1: LFPoint, p2: LFPoint, n_cells: int):
    """Position-only refinement of a short LF-line with both endpoint
    disparities held fixed."""
    line = _line_from_corners((p1.x, p1.y), (p2.x, p2.y))
    if line.orientation == "horizontal":
        params = (p1.y, p1.lam, p2.y, p2.lam)
    else:
        params = (p1.x, p1.lam, p2.x, p2.lam)
    line = line.with_params(params)
    matcher = _segment_matcher(raw, grid, line, cv, cfg, n_cells=n_cells)

    def score(pos):
        return matcher.score_line(
            line.with_params((pos[0], params[1], pos[1], params[3]))
        )

    x, _, _, _ = _pattern_search(
        score,
        [params[0], params[2]],
        [cfg.step_position, cfg.step_position],
        [cfg.tol_position, cfg.tol_position],
        cfg,
    )
    refined = line.with_params((x[0], params[1], x[1], params[3]))
    if matcher.mean_active_ncc(refined) < cfg.min_mean_ncc:
        raise DetectionError("polished segment has no reliable support")
    return refined, matcher


# ---------------------------------------------------------------------------
# Whole-image plane consensus
#
# Every corner of one flat board satisfies a 10-DOF model: positions obey
# a homography H from board coordinates, and because the homography's
# third row is proportional to the camera-frame depth of the board plane,
# disparities obey lam = alpha + beta / (h3 . p).  Robustly fitting this
# model flags corners whose row/column lines went astray; they are then
# re-anchored at the model prediction and re-polished.


def _fit_plane_consensus(points, valid, board_xy, image_center=None):
    """Robust plane-model fit.  Returns (pred_xy, pred_lam, pos_resid,
    lam_resid) over all board corners, or None when underdetermined.
    When ``image_center`` is given, a single radial term about it is
    estimated alongside the homography so that lens distortion does not
    masquerade as corner error."""
    ok = valid & np.isfinite(points[..., 0])
    if ok.sum() < 8:
        return None
    uv = board_xy[ok]
    xy = points[ok][:, :2]
    lam = points[ok][:, 2]
    weights = np.ones(len(uv))
    H = None
    for _ in range(4):
        idx = weights > 1e-3
        if idx.sum() < 6:
            break
        try:
            H = homography_dlt(uv[idx], xy[idx])
        except EstimationError:
            return None
        resid = np.sqrt(((apply_homography(H, uv) - xy) ** 2).sum(axis=1))
        scale = max(1.4826 * np.median(resid), 0.02)
        weights = 1.0 / np.maximum(resid / (3.0 * scale), 1.0)
    if H is None:
        return None
    uv_all = board_xy.reshape(-1, 2)
    ph = np.concatenate([uv_all, np.ones((len(uv_all), 1))], axis=1) @ H.T
    pred_xy = (ph[:, :2] / ph[:, 2:3]).reshape(board_xy.shape)

    if image_center is not None:
        # first-order radial correction: detected = pred + k (|pred-c|/s)^2 (pred-c)
        c0 = np.asarray(image_center, dtype=np.float64)
        scale_r = max(float(np.abs(xy - c0).max()), 1.0)
        for _ in range(2):
            pred_ok = pred_xy[ok]
            rel = pred_ok - c0
            r2 = ((rel / scale_r) ** 2).sum(axis=1)
            basis = rel * r2[:, None]
            delta = xy - pred_ok
            denom = float((weights[:, None] * basis * basis).sum())
            if denom < 1e-12:
                break
            k_rad = float((weights[:, None] * basis * delta).sum() / denom)
            rel_all = pred_xy.reshape(-1, 2) - c0
            r2_all = ((rel_all / scale_r) ** 2).sum(axis=1)
            pred_xy = (pred_xy.reshape(-1, 2) + k_rad * rel_all * r2_all[:, None]).reshape(
                board_xy.shape
            )
    depth_proxy = (
        np.concatenate([uv, np.ones((len(uv), 1))], axis=1) @ H.T
    )[:, 2]
    w = 1.0 / depth_proxy
    w_mean = w.mean()
    w = w - w_mean  # centred regressor keeps frontal boards well posed
    lam_weights = np.ones(len(uv))
    alpha = beta = None
    for _ in range(4):
        A = np.stack([np.ones_like(w), w], axis=1) * lam_weights[:, None]
        sol, *_ = np.linalg.lstsq(A, lam * lam_weights, rcond=None)
        alpha, beta = sol
        resid = np.abs(alpha + beta * w - lam)
        scale = max(1.4826 * np.median(resid), 5e-4)
        lam_weights = 1.0 / np.maximum(resid / (3.0 * scale), 1.0)
    w_all = 1.0 / ph[:, 2] - w_mean
    pred_lam = (alpha + beta * w_all).reshape(board_xy.shape[:2])
    pos_resid = np.sqrt(((pred_xy - points[..., :2]) ** 2).sum(axis=-1))
    lam_resid = np.abs(pred_lam - points[..., 2])
    return pred_xy, pred_lam, pos_resid, lam_resid


def _reposition_segment(
    seg: LFLine, matcher: _StripMatcher, lam: float, lp: LFPoint, cfg: DetectorConfig
) -> LFLine:
    """Re-run the position-only search of a polished segment with its
    disparity level moved to the refit value at the corner."""
    p1, p2 = seg.endpoints()
    t_corner = _line_param_at(seg, lp)
    lam_at_corner = p1.lam + t_corner * (p2.lam - p1.lam)
    shift = lam - lam_at_corner
    params = list(seg.params)
    params[1] += shift
    params[3] += shift

    def score(pos):
        return matcher.score_line(seg.with_params((pos[0], params[1], pos[1], params[3])))

    x, _, _, _ = _pattern_search(
        score,
        [params[0], params[2]],
        [cfg.step_position, cfg.step_position],
        [cfg.tol_position, cfg.tol_position],
        cfg,
    )
    return seg.with_params((x[0], params[1], x[1], params[3]))


def _refit_disparity(lp: LFPoint, h, v, cfg: DetectorConfig) -> float:
    """Final disparity estimate for a corner: with the two polished lines
    and the intersected position frozen, scan the disparity level that
    maximizes the combined strip score (the per-line level/position
    trade-off is gone once positions are held)."""
    parts = []
    for seg, matcher in (h, v):
        p1, p2 = seg.endpoints()
        t1 = _line_param_at(seg, lp)
        off1 = p1.lam - (p1.lam + t1 * (p2.lam - p1.lam))
        off2 = p2.lam - (p1.lam + t1 * (p2.lam - p1.lam))
        parts.append((matcher, p1, p2, off1, off2))

    def score(lam):
        total = 0.0
        for matcher, p1, p2, off1, off2 in parts:
            total += matcher.score_endpoints(
                p1.x, p1.y, lam + off1, p2.x, p2.y, lam + off2
            )
        return total

    lams = np.arange(
        lp.lam - cfg.disparity_refit_range,
        lp.lam + cfg.disparity_refit_range + 0.5 * cfg.disparity_refit_step,
        cfg.disparity_refit_step,
    )
    scores = np.array([score(l) for l in lams])
    k = int(np.argmax(scores))
    if scores[k] <= 0.0:
        return lp.lam
    lam_hat = float(lams[k])
    if 0 < k < len(lams) - 1:
        s0, s1, s2 = scores[k - 1], scores[k], scores[k + 1]
        denom = s0 - 2.0 * s1 + s2
        if abs(denom) > 1e-12:
            delta = 0.5 * (s0 - s2) / denom
            if abs(delta) <= 1.0:
                lam_hat += delta * cfg.disparity_refit_step
    return lam_hat


def _line_param_at(seg: LFLine, lp: LFPoint) -> float:
    """Projection parameter of an LF-point's image position onto the
    segment's image-plane direction."""
    p1, p2 = seg.endpoints()
    d = np.array([p2.x - p1.x, p2.y - p1.y])
    return float((np.array([lp.x, lp.y]) - (p1.x, p1.y)) @ d / (d @ d))


# ---------------------------------------------------------------------------
# Corner files


def write_corner_file(
    path: str | Path,
    board: DetectedBoard,
    image: str | None = None,
    board_spec: CheckerboardSpec | None = None,
    config_hash: str | None = None,
) -> None:
    payload = {
        "image": image,
        "rows": board.rows,
        "cols": board.cols,
        "corners": board.corner_list(),
    }
    if board_spec is not None:
        payload["board"] = board_spec.to_dict()
    if config_hash:
        payload["config_hash"] = config_hash
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def read_corner_file(path: str | Path) -> DetectedBoard:
    path = Path(path)
    if not path.exists():
        raise InputError(f"corner file not found: {path}")
    data = json.loads(path.read_text())
    rows, cols = int(data["rows"]), int(data["cols"])
    points = np.full((rows, cols, 3), np.nan)
    valid = np.zeros((rows, cols), dtype=bool)
    residuals = np.full((rows, cols), np.nan)
    for c in data["corners"]:
        i, j = int(c["i"]), int(c["j"])
        points[i, j] = (c["x"], c["y"], c["lam"])
        residuals[i, j] = c["residual"]
        valid[i, j] = bool(c["valid"])
    return DetectedBoard(
        rows=rows,
        cols=cols,
        points=points,
        valid=valid,
        residuals=residuals,
        coarse=np.full((rows, cols, 2), np.nan),
        diagnostics={"image": data.get("image"), "config_hash": data.get("config_hash")},
    )
