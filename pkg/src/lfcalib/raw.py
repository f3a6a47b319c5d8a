"""Raw light-field images and the micro-lens grid.

A raw image is a single grayscale intensity field in [0, 1]; every pixel
belongs to the sub-image of exactly one micro-lens.  The grid model
generates sub-image centre positions on the sensor (rectangular or
hexagonal lattice, optionally rotated) and answers nearest-centre
queries.  When centres are unknown they can be estimated from a white
image, which shows one intensity peak per micro-lens.

Fractional sampling is bilinear everywhere, so downstream correlation
scores are reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EstimationError, InputError

__all__ = [
    "RawImage",
    "MicroLensGrid",
    "SubImage",
    "GridFit",
    "DatasetManifest",
    "bilinear_sample",
    "lens_center",
    "nearest_lens",
    "estimate_grid_from_white_image",
    "center_view_image",
    "read_image",
    "write_pgm",
    "write_png",
    "load_manifest",
]

_HEX_ROW = math.sqrt(3.0) / 2.0


@dataclass(frozen=True)
class RawImage:
    """Grayscale raw sensor image, intensities in [0, 1], row-major
    (pixels[y, x])."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise InputError("raw image must be a non-empty 2D array")
        if not np.all(np.isfinite(px)):
            raise InputError("raw image contains non-finite intensities")
        if px.min() < 0.0 or px.max() > 1.0:
            raise InputError("raw image intensities must lie in [0, 1]")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def bilinear_sample(pixels: np.ndarray, x, y):
    """Bilinearly interpolate ``pixels[y, x]`` at fractional positions.
    Coordinates are clamped to the valid interpolation domain."""
    h, w = pixels.shape
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1.0)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(x, dtype=np.int64)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(y, dtype=np.int64)
    fx = x - x0
    fy = y - y0
    p00 = pixels[y0, x0]
    p01 = pixels[y0, np.minimum(x0 + 1, w - 1)]
    p10 = pixels[np.minimum(y0 + 1, h - 1), x0]
    p11 = pixels[np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)]
    return (
        p00 * (1 - fx) * (1 - fy)
        + p01 * fx * (1 - fy)
        + p10 * (1 - fx) * fy
        + p11 * fx * fy
    )


# ---------------------------------------------------------------------------
# Micro-lens grid


@dataclass(frozen=True)
class MicroLensGrid:
    """Lattice of sub-image centres.

    ``origin`` is the pixel position of lens (0, 0); lens (i, j) sits at
    origin + Rot(rotation) @ offset(i, j) where the unrotated offset is
    (j * pitch, i * pitch) for a rectangular layout and, for a hexagonal
    one, (j * pitch + (i % 2) * pitch / 2, i * pitch * sqrt(3) / 2).
    """

    layout: str
    pitch: float
    rotation: float
    origin: tuple[float, float]
    rows: int
    cols: int

    def __post_init__(self) -> None:
        if self.layout not in ("rectangular", "hexagonal"):
            raise InputError(f"unknown grid layout {self.layout!r}")
        if self.pitch <= 1.0:
            raise InputError("grid pitch must exceed one pixel")
        if self.rows < 1 or self.cols < 1:
            raise InputError("grid must contain at least one lens")

    def _lattice_offsets(self, i, j):
        i = np.asarray(i, dtype=np.float64)
        j = np.asarray(j, dtype=np.float64)
        if self.layout == "rectangular":
            gx = j * self.pitch
            gy = i * self.pitch
        else:
            parity = np.mod(np.round(i).astype(np.int64), 2)
            gx = (j + 0.5 * parity) * self.pitch
            gy = i * self.pitch * _HEX_ROW
        return gx, gy

    def center(self, i, j):
        """Centre position(s) of lens (i, j); accepts arrays and
        fractional indices (fractional indices interpolate the lattice
        map, which is exact for the rectangular layout)."""
        gx, gy = self._lattice_offsets(i, j)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return (
            self.origin[0] + c * gx - s * gy,
            self.origin[1] + s * gx + c * gy,
        )

    def centers(self) -> np.ndarray:
        """(rows, cols, 2) array of every lens centre."""
        ii, jj = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        x, y = self.center(ii, jj)
        return np.stack([x, y], axis=-1)

    def nearest(self, x, y):
        """Index (i, j) of the in-range lens centre nearest to (x, y);
        exact ties go to the lexicographically smaller index.  Array
        inputs are supported."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        ux = c * (x - self.origin[0]) + s * (y - self.origin[1])
        uy = -s * (x - self.origin[0]) + c * (y - self.origin[1])
        if self.layout == "rectangular":
            i0 = np.round(uy / self.pitch).astype(np.int64)
            j0 = np.round(ux / self.pitch).astype(np.int64)
            di = np.array([-1, 0, 1])
        else:
            i0 = np.round(uy / (self.pitch * _HEX_ROW)).astype(np.int64)
            j0 = np.round(ux / self.pitch).astype(np.int64)
            di = np.array([-1, 0, 1])
        best_d = np.full(np.shape(x), np.inf)
        best_i = np.zeros(np.shape(x), dtype=np.int64)
        best_j = np.zeros(np.shape(x), dtype=np.int64)
        for a in di:
            for b in (-1, 0, 1):
                ii = np.clip(i0 + a, 0, self.rows - 1)
                jj = np.clip(j0 + b, 0, self.cols - 1)
                cx, cy = self.center(ii, jj)
                d = (cx - x) ** 2 + (cy - y) ** 2
                # lexicographic tie-break on exact distance ties
                better = (d < best_d) | (
                    (d == best_d) & ((ii < best_i) | ((ii == best_i) & (jj < best_j)))
                )
                best_d = np.where(better, d, best_d)
                best_i = np.where(better, ii, best_i)
                best_j = np.where(better, jj, best_j)
        if np.ndim(x) == 0:
            return int(best_i), int(best_j)
        return best_i, best_j

    def in_bounds(self, width: int, height: int) -> np.ndarray:
        """Boolean (rows, cols) mask of centres inside the sensor."""
        cs = self.centers()
        return (
            (cs[..., 0] >= 0)
            & (cs[..., 0] <= width - 1)
            & (cs[..., 1] >= 0)
            & (cs[..., 1] <= height - 1)
        )

    def to_dict(self) -> dict:
        return {
            "layout": self.layout,
            "pitch": self.pitch,
            "rotation": self.rotation,
            "origin": list(self.origin),
            "rows": self.rows,
            "cols": self.cols,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MicroLensGrid":
        return cls(
            layout=data["layout"],
            pitch=float(data["pitch"]),
            rotation=float(data.get("rotation", 0.0)),
            origin=(float(data["origin"][0]), float(data["origin"][1])),
            rows=int(data["rows"]),
            cols=int(data["cols"]),
        )


def lens_center(grid: MicroLensGrid, i: int, j: int) -> tuple[float, float]:
    """Centre of lens (i, j); raises on out-of-range indices."""
    if not (0 <= i < grid.rows and 0 <= j < grid.cols):
        raise InputError(f"lens index ({i}, {j}) outside {grid.rows}x{grid.cols} grid")
    x, y = grid.center(i, j)
    return float(x), float(y)


def nearest_lens(grid: MicroLensGrid, p: tuple[float, float]) -> tuple[int, int]:
    return grid.nearest(p[0], p[1])


@dataclass(frozen=True)
class SubImage:
    """Circular pixel window of one micro-lens image inside a raw image."""

    center: tuple[float, float]
    radius: float
    raw: RawImage = field(repr=False)

    def offsets(self) -> np.ndarray:
        """(P, 2) integer offset lattice covering the disc."""
        r = int(math.floor(self.radius))
        dx, dy = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
        keep = dx**2 + dy**2 <= self.radius**2
        return np.stack([dx[keep], dy[keep]], axis=-1).astype(np.float64)

    def window(self) -> np.ndarray:
        """Raw intensities sampled (bilinearly) on the disc lattice."""
        off = self.offsets()
        return bilinear_sample(
            self.raw.pixels, self.center[0] + off[:, 0], self.center[1] + off[:, 1]
        )


def default_subimage_radius(pitch: float) -> float:
    """Guard-banded disc radius: half a pitch minus half a pixel, keeping
    boundary pixels (shared between neighbouring sub-images) out."""
    return 0.5 * pitch - 0.5


# ---------------------------------------------------------------------------
# Centre-view extraction


def center_view_image(raw: RawImage, grid: MicroLensGrid) -> np.ndarray:
    """Centre-view sub-aperture image: one sample per lens, bilinear at
    each lens centre, indexed [i, j]."""
    cs = grid.centers()
    return bilinear_sample(raw.pixels, cs[..., 0], cs[..., 1])


# ---------------------------------------------------------------------------
# Grid estimation from a white image


@dataclass(frozen=True)
class GridFit:
    grid: MicroLensGrid
    rms_residual: float
    n_points: int


def _peak_centers(white: RawImage, min_rel_intensity: float = 0.35) -> np.ndarray:
    """Sub-pixel intensity peaks: strict local maxima refined by a
    quadratic fit of log-intensity (exact for Gaussian-shaped spots)."""
    from scipy.ndimage import maximum_filter

    px = white.pixels
    peak = maximum_filter(px, size=3, mode="constant", cval=-1.0)
    mask = (px >= peak) & (px > min_rel_intensity * px.max())
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    ys, xs = np.nonzero(mask)
    out = []
    eps = 1e-12
    for y, x in zip(ys, xs):
        patch = np.log(np.maximum(px[y - 1 : y + 2, x - 1 : x + 2], eps))
        dx = 0.5 * (patch[1, 2] - patch[1, 0])
        dy = 0.5 * (patch[2, 1] - patch[0, 1])
        dxx = patch[1, 2] - 2 * patch[1, 1] + patch[1, 0]
        dyy = patch[2, 1] - 2 * patch[1, 1] + patch[0, 1]
        dxy = 0.25 * (patch[2, 2] - patch[2, 0] - patch[0, 2] + patch[0, 0])
        det = dxx * dyy - dxy * dxy
        if abs(det) < eps:
            out.append((float(x), float(y)))
            continue
        ox = -(dyy * dx - dxy * dy) / det
        oy = -(dxx * dy - dxy * dx) / det
        if abs(ox) > 1.0 or abs(oy) > 1.0:
            ox = oy = 0.0
        out.append((x + ox, y + oy))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _dominant_rotation(points: np.ndarray, symmetry: int) -> tuple[float, float]:
    """Pitch and lattice rotation from nearest-neighbour displacements,
    using a circular mean with the lattice's rotational symmetry."""
    from scipy.spatial import cKDTree

    tree = cKDTree(points)
    dist, idx = tree.query(points, k=2)
    disp = points[idx[:, 1]] - points
    lengths = dist[:, 1]
    pitch = float(np.median(lengths))
    ang = np.arctan2(disp[:, 1], disp[:, 0])
    mean = np.angle(np.mean(np.exp(1j * symmetry * ang))) / symmetry
    return pitch, float(mean)


def _lattice_coords(i: np.ndarray, j: np.ndarray, layout: str) -> tuple[np.ndarray, np.ndarray]:
    if layout == "rectangular":
        return j.astype(np.float64), i.astype(np.float64)
    parity = np.mod(i, 2)
    return j + 0.5 * parity, i * _HEX_ROW


def _fit_lattice(points: np.ndarray, i: np.ndarray, j: np.ndarray, layout: str):
    """Least-squares fit of origin/pitch/rotation given integer indices.
    The model centre(i, j) = origin + [[a, -b], [b, a]] @ g(i, j) is
    linear in (x0, y0, a, b)."""
    gx, gy = _lattice_coords(i, j, layout)
    n = len(points)
    A = np.zeros((2 * n, 4))
    A[0::2, 0] = 1.0
    A[0::2, 2] = gx
    A[0::2, 3] = -gy
    A[1::2, 1] = 1.0
    A[1::2, 2] = gy
    A[1::2, 3] = gx
    rhs = points.reshape(-1)
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    x0, y0, a, b = sol
    resid = A @ sol - rhs
    rms = float(np.sqrt(np.mean(resid**2)))
    return (x0, y0), math.hypot(a, b), math.atan2(b, a), rms


def estimate_grid_from_white_image(
    white: RawImage, layout: str = "rectangular", min_peaks: int = 16
) -> GridFit:
    """Estimate the micro-lens grid from a white image.

    Peaks are detected per lens, indexed onto the lattice implied by the
    dominant nearest-neighbour direction, and the grid parameters are
    recovered by a linear least-squares fit.  Raises
    :class:`EstimationError` when fewer than ``min_peaks`` usable peaks
    exist.
    """
    if layout not in ("rectangular", "hexagonal"):
        raise InputError(f"unknown grid layout {layout!r}")
    points = _peak_centers(white)
    if len(points) < min_peaks:
        raise EstimationError(
            f"found {len(points)} intensity peaks, need at least {min_peaks}"
        )
    symmetry = 4 if layout == "rectangular" else 6
    pitch0, rot0 = _dominant_rotation(points, symmetry)
    if not np.isfinite(pitch0) or pitch0 <= 1.0:
        raise EstimationError("could not establish a lattice pitch")

    anchor = points[np.argmin(np.sum((points - points.mean(axis=0)) ** 2, axis=1))]
    c, s = math.cos(-rot0), math.sin(-rot0)
    ux = (c * (points[:, 0] - anchor[0]) - s * (points[:, 1] - anchor[1])) / pitch0
    uy = (s * (points[:, 0] - anchor[0]) + c * (points[:, 1] - anchor[1])) / pitch0

    best = None
    parities = (0,) if layout == "rectangular" else (0, 1)
    for parity in parities:
        if layout == "rectangular":
            i = np.round(uy).astype(np.int64)
            j = np.round(ux).astype(np.int64)
        else:
            i = np.round(uy / _HEX_ROW).astype(np.int64)
            j = np.round(ux - 0.5 * np.mod(i + parity, 2)).astype(np.int64)
            i = i + parity  # shift so parity pattern matches convention
        origin, pitch, rot, rms = _fit_lattice(points, i, j, layout)
        if best is None or rms < best[4]:
            best = (origin, pitch, rot, (i, j), rms)
    origin, pitch, rot, (i, j), rms = best

    if rms > 0.35 * pitch:
        raise EstimationError(f"lattice fit residual {rms:.3f} px is implausibly large")

    # normalize indices to start at (0, 0); for hexagonal grids keep row
    # parity intact by allowing only even row shifts
    imin = int(i.min())
    if layout == "hexagonal" and imin % 2 != 0:
        imin -= 1
    jmin = int(j.min())
    i = i - imin
    j = j - jmin
    origin, pitch, rot, rms = _fit_lattice(points, i, j, layout)
    grid = MicroLensGrid(
        layout=layout,
        pitch=pitch,
        rotation=rot,
        origin=(float(origin[0]), float(origin[1])),
        rows=int(i.max()) + 1,
        cols=int(j.max()) + 1,
    )
    return GridFit(grid=grid, rms_residual=rms, n_points=len(points))


# ---------------------------------------------------------------------------
# Image I/O (binary PGM P5 and grayscale PNG)


def read_image(path: str | Path) -> RawImage:
    path = Path(path)
    if not path.exists():
        raise InputError(f"image not found: {path}")
    if path.suffix.lower() in (".pgm", ".ppm"):
        return _read_pgm(path)
    return _read_png(path)


def _read_pgm(path: Path) -> RawImage:
    data = path.read_bytes()
    if not data.startswith(b"P5"):
        raise InputError(f"{path}: only binary (P5) PGM is supported")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval <= 0 or maxval > 65535:
        raise InputError(f"{path}: unsupported PGM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    count = width * height
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if arr.size != count:
        raise InputError(f"{path}: truncated PGM payload")
    return RawImage(arr.reshape(height, width).astype(np.float64) / maxval)


def write_pgm(path: str | Path, image: RawImage, maxval: int = 65535, comment: str | None = None) -> None:
    """Write a binary PGM; an optional single-line comment is embedded in
    the header (used to stamp outputs with their config hash)."""
    if maxval not in (255, 65535):
        raise InputError("PGM maxval must be 255 or 65535")
    header = f"P5\n"
    if comment:
        header += f"# {comment}\n"
    header += f"{image.width} {image.height}\n{maxval}\n"
    quant = np.round(image.pixels * maxval)
    payload = quant.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    Path(path).write_bytes(header.encode("ascii") + payload)


def _read_png(path: Path) -> RawImage:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I"):
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.float64)
    scale = 65535.0 if arr.max() > 255.0 else 255.0
    return RawImage(np.clip(arr / scale, 0.0, 1.0))


def write_png(path: str | Path, image: RawImage) -> None:
    from PIL import Image

    arr = np.round(image.pixels * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(str(path))


# ---------------------------------------------------------------------------
# Dataset manifest


@dataclass(frozen=True)
class DatasetManifest:
    """Dataset description: raw image paths, optional white image,
    checkerboard layout, optional known grid, optional sidecar paths."""

    images: tuple[str, ...]
    board: dict
    white_image: str | None = None
    grid: MicroLensGrid | None = None
    sidecars: tuple[str, ...] = ()
    config_hash: str | None = None

    def to_dict(self) -> dict:
        out = {
            "images": list(self.images),
            "board": dict(self.board),
            "white_image": self.white_image,
            "grid": self.grid.to_dict() if self.grid else None,
            "sidecars": list(self.sidecars),
        }
        if self.config_hash:
            out["config_hash"] = self.config_hash
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        return cls(
            images=tuple(data["images"]),
            board=dict(data["board"]),
            white_image=data.get("white_image"),
            grid=MicroLensGrid.from_dict(data["grid"]) if data.get("grid") else None,
            sidecars=tuple(data.get("sidecars", ())),
            config_hash=data.get("config_hash"),
        )


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest not found: {path}")
    try:
        return DatasetManifest.from_dict(json.loads(path.read_text()))
    except (KeyError, ValueError) as exc:
        raise InputError(f"malformed manifest {path}: {exc}") from exc
