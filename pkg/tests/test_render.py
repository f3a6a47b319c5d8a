import numpy as np
import pytest

from lfcalib.errors import GeometryError
from lfcalib.model import (
    LFPoint,
    PhysicalCameraParams,
    PixelIndex4,
    Pose,
    intrinsics_from_physical,
    lf_point_slice,
    projection_matrix,
)
from lfcalib.raw import MicroLensGrid, bilinear_sample, center_view_image
from lfcalib.render import (
    CheckerboardSpec,
    GroundTruth,
    RenderConfig,
    SceneBoard,
    analytic_corner_lf_points,
    load_sidecar,
    pixel_chief_rays,
    render,
    write_sidecar,
)
from conftest import frontal_board, small_camera, small_grid


class TestAnalyticCorners:
    def test_axial_corner_hits_principal(self, scene):
        cam, spec = scene["cam"], CheckerboardSpec(3, 3, 20.0)
        # place corner (1, 1) on the optical axis
        center = np.array([20.0, 20.0, 0.0])
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 600.0]) - center)
        corners = analytic_corner_lf_points(SceneBoard(spec, pose), cam)
        mid = [c for c in corners if c["i"] == 1 and c["j"] == 1][0]
        assert mid["x"] == pytest.approx(cam.cx)
        assert mid["y"] == pytest.approx(cam.cy)

    def test_focal_plane_board_has_zero_disparity(self):
        # camera focused at finite depth: L > F
        cam = PhysicalCameraParams(11.0, 12.0, 0.5, 0.014, 184.0, 184.0)
        intr = intrinsics_from_physical(cam)
        z_focus = -intr.K2 / intr.K1
        assert z_focus > 0
        spec = CheckerboardSpec(3, 3, 10.0)
        pose = Pose(np.eye(3), np.array([-10.0, -10.0, z_focus]))
        corners = analytic_corner_lf_points(SceneBoard(spec, pose), cam)
        for c in corners:
            assert c["lam"] == pytest.approx(0.0, abs=1e-12)

    def test_tilted_board_disparity_monotone(self, scene):
        spec = CheckerboardSpec(3, 5, 25.0)
        pose = Pose.from_rotvec([0.0, np.deg2rad(25.0), 0.0], [0.0, 0.0, 0.0])
        t = np.array([-50.0, -25.0, 600.0])
        board = SceneBoard(spec, Pose(pose.R, t))
        corners = analytic_corner_lf_points(board, scene["cam"])
        row = sorted((c for c in corners if c["i"] == 1), key=lambda c: c["j"])
        lams = [c["lam"] for c in row]
        diffs = np.diff(lams)
        assert np.all(diffs > 0) or np.all(diffs < 0)

    def test_behind_camera_rejected(self, scene):
        spec = CheckerboardSpec(2, 2, 10.0)
        with pytest.raises(GeometryError):
            SceneBoard(spec, Pose(np.eye(3), np.array([0.0, 0.0, -500.0])))


class TestRenderBasics:
    def test_constant_scene_dark(self, scene):
        # a single huge dark cell covering the field
        spec = CheckerboardSpec(2, 2, 4000.0)
        pose = Pose(np.eye(3), np.array([-2000.0, -2000.0, 500.0]))
        cfg = RenderConfig(
            cam=scene["cam"], grid=scene["grid"], samples_per_pixel=2, bright=0.0, dark=0.0
        )
        img = render(SceneBoard(spec, pose), cfg, seed=1)
        assert img.pixels.max() <= 1e-9

    def test_intensities_bounded(self, scene):
        img = render(scene["board"], scene["cfg"], seed=2)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0

    def test_deterministic_for_seed(self, scene):
        cfg = RenderConfig(cam=scene["cam"], grid=scene["grid"], samples_per_pixel=2,
                           noise_sigma=0.01)
        a = render(scene["board"], cfg, seed=7)
        b = render(scene["board"], cfg, seed=7)
        assert np.array_equal(a.pixels, b.pixels)
        c = render(scene["board"], cfg, seed=8)
        assert not np.array_equal(a.pixels, c.pixels)

    def test_noise_scales_linearly(self, scene):
        # flat background region: doubling sigma doubles the residual std
        spec = CheckerboardSpec(2, 2, 10.0)
        pose = Pose(np.eye(3), np.array([300.0, 300.0, 800.0]))  # board far off-axis
        stds = []
        for sigma in (0.01, 0.02):
            cfg = RenderConfig(cam=scene["cam"], grid=scene["grid"], samples_per_pixel=1,
                               noise_sigma=sigma)
            img = render(SceneBoard(spec, pose), cfg, seed=3)
            region = img.pixels[40:140, 40:140]
            stds.append(region.std())
        assert stds[1] / stds[0] == pytest.approx(2.0, rel=0.05)

    def test_reverse_trace_matches_projection_matrix(self, scene):
        cam, grid = scene["cam"], scene["grid"]
        rng = np.random.default_rng(5)
        px = rng.uniform(10, 350, size=64)
        py = rng.uniform(10, 350, size=64)
        s, t, u, v = pixel_chief_rays(grid, cam, px, py)
        mat = projection_matrix(cam)
        for k in range(len(px)):
            i, j = grid.nearest(px[k], py[k])
            cx, cy = grid.center(i, j)
            ray = mat.apply(PixelIndex4(px[k] - cx, py[k] - cy, cx, cy))
            assert abs(ray.s - s[k]) < 1e-9
            assert abs(ray.u - u[k]) < 1e-9
            assert abs(ray.v - v[k]) < 1e-9


class TestRenderAgainstModel:
    def test_center_view_shows_board_pattern(self, scene):
        """Centre-view samples must match the analytic pinhole image of the
        board away from edges."""
        img = render(scene["board"], scene["cfg"], seed=4)
        cv = center_view_image(img, scene["grid"])
        cam, grid, intr = scene["cam"], scene["grid"], scene["intr"]
        board = scene["board"]
        spec = board.spec
        # sample cell interiors: midpoints between corners
        xy = spec.corner_board_xy()
        R, t = board.pose.R, board.pose.t
        correct = 0
        total = 0
        for i in range(spec.rows - 1):
            for j in range(spec.cols - 1):
                mid = 0.5 * (xy[i, j] + xy[i + 1, j + 1])
                p = R @ np.array([mid[0], mid[1], 0.0]) + t
                u = intr.fx * p[0] / p[2] + intr.cx
                v = intr.fy * p[1] / p[2] + intr.cy
                # lens-index coordinates of that raw position
                lx = (u - grid.origin[0]) / grid.pitch
                ly = (v - grid.origin[1]) / grid.pitch
                value = bilinear_sample(cv, lx, ly)
                expected = 1.0 if (i + j) % 2 == 0 else 0.0
                total += 1
                correct += abs(value - expected) < 0.25
        assert correct == total

    def test_subimage_edge_positions_match_sliced_lines(self, scene):
        """The intensity edge inside each sub-image must lie on the 2D line
        predicted by slicing the ground-truth corner pair (within 0.1 px,
        zero noise)."""
        cam, grid = scene["cam"], scene["grid"]
        cfg = RenderConfig(cam=cam, grid=grid, samples_per_pixel=16)
        board = frontal_board(z=450.0, cell=35.0, rows=3, cols=4, tilt_deg=0.0)
        img = render(board, cfg, seed=6)
        gt = analytic_corner_lf_points(board, cam)
        bycorner = {(c["i"], c["j"]): c for c in gt}
        # vertical segment between corners (0,1) and (1,1)
        a, b = bycorner[(0, 1)], bycorner[(1, 1)]
        pa = LFPoint(a["x"], a["y"], a["lam"])
        pb = LFPoint(b["x"], b["y"], b["lam"])
        mid = np.array([(a["x"] + b["x"]) / 2, (a["y"] + b["y"]) / 2])
        i0, j0 = grid.nearest(mid[0], mid[1])
        c0 = grid.center(i0, j0)
        # sliced line through the endpoint images in local offset coords
        h1 = np.array([c0[0] - pa.x, c0[1] - pa.y, pa.lam])
        h2 = np.array([c0[0] - pb.x, c0[1] - pb.y, pb.lam])
        la, lb, lc = np.cross(h1, h2)
        nrm = np.hypot(la, lb)
        la, lb, lc = la / nrm, lb / nrm, lc / nrm
        # scan rows of the sub-image; locate the intensity transition by
        # linear interpolation of the 0.5 crossing
        r = 4
        errors = []
        for dy in range(-r + 1, r):
            xs = np.arange(-r, r + 1, dtype=np.float64)
            vals = bilinear_sample(img.pixels, c0[0] + xs, np.full_like(xs, c0[1] + dy))
            dv = np.diff(vals)
            k = int(np.argmax(np.abs(dv)))
            if abs(dv[k]) < 0.3:
                continue
            lo, hi = vals[k], vals[k + 1]
            frac = (0.5 - lo) / (hi - lo)
            x_cross = xs[k] + frac
            # predicted crossing of the line at this row
            if abs(la) < 0.5:
                continue
            x_line = -(lb * dy + lc) / la
            errors.append(abs(x_cross - x_line))
        assert len(errors) >= 3
        assert np.median(errors) < 0.1

    def test_zero_disparity_point_confined_to_one_lens(self):
        cam = PhysicalCameraParams(11.0, 12.0, 0.5, 0.014, 184.0, 184.0)
        intr = intrinsics_from_physical(cam)
        z_focus = -intr.K2 / intr.K1
        lp = LFPoint(100.0, 100.0, 0.0)
        for off in ((2, 0), (0, 3), (-1, -1)):
            assert lf_point_slice(lp, off) == (100.0, 100.0)
        assert z_focus > 0


class TestSidecar:
    def test_round_trip(self, tmp_path, scene):
        gt = GroundTruth(
            cam=scene["cam"],
            intrinsics=scene["intr"],
            grid=scene["grid"],
            board=scene["board"].spec,
            pose=scene["board"].pose,
            corners=analytic_corner_lf_points(scene["board"], scene["cam"]),
            config_hash="cafe",
        )
        p = tmp_path / "gt.json"
        write_sidecar(p, gt)
        back = load_sidecar(p)
        assert back.cam == scene["cam"]
        assert back.intrinsics == scene["intr"]
        assert back.grid == scene["grid"]
        assert np.allclose(back.pose.R, scene["board"].pose.R)
        assert len(back.corners) == len(gt.corners)
        assert back.config_hash == "cafe"
