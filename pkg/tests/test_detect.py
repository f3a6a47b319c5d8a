import numpy as np
import pytest

from lfcalib.errors import DetectionError, GeometryError
from lfcalib.model import LFPoint, Pose
from lfcalib.raw import RawImage, SubImage, center_view_image
from lfcalib.render import CheckerboardSpec, RenderConfig, SceneBoard, analytic_corner_lf_points, render
from lfcalib.detect import (
    DetectorConfig,
    LFLine,
    Template4D,
    classify_orientation,
    detect_board,
    detect_saddle_corners,
    initial_lf_line,
    intersect_lf_lines,
    make_template,
    order_corner_grid,
    planes_through_lf_points,
    read_corner_file,
    refine_lf_line,
    slice_line,
    total_ncc,
    write_corner_file,
)
from conftest import small_camera, small_grid


def rolled_board(z=500.0, roll=8.0, tilt=6.0, rows=4, cols=5, cell=30.0):
    spec = CheckerboardSpec(rows=rows, cols=cols, cell_size=cell)
    center = np.array([(cols - 1) * cell / 2.0, (rows - 1) * cell / 2.0, 0.0])
    pose0 = Pose.from_rotvec(np.deg2rad([tilt, -tilt / 2.0, roll]), np.zeros(3))
    t = np.array([0.0, 0.0, z]) - pose0.R @ center
    return SceneBoard(spec, Pose(pose0.R, t))


@pytest.fixture(scope="module")
def detection_scene():
    cam, grid = small_camera(), small_grid()
    board = rolled_board()
    img = render(board, RenderConfig(cam=cam, grid=grid, samples_per_pixel=16), seed=0)
    gt = {(c["i"], c["j"]): c for c in analytic_corner_lf_points(board, cam)}
    return {"cam": cam, "grid": grid, "board": board, "img": img, "gt": gt}


def match_to_gt(det, gt):
    """Best corner-error arrays over the label-flip ambiguity."""
    best = None
    for fi in (0, 1):
        for fj in (0, 1):
            lat, lam = [], []
            for i in range(det.rows):
                for j in range(det.cols):
                    if not det.valid[i, j]:
                        continue
                    g = gt[(det.rows - 1 - i if fi else i, det.cols - 1 - j if fj else j)]
                    lat.append(np.hypot(det.points[i, j, 0] - g["x"], det.points[i, j, 1] - g["y"]))
                    lam.append(abs(det.points[i, j, 2] - g["lam"]))
            if lat and (best is None or np.mean(lat) < np.mean(best[0])):
                best = (np.asarray(lat), np.asarray(lam), (fi, fj))
    return best


class TestClassifyOrientation:
    def test_near_horizontal(self):
        assert classify_orientation((0, 0), (10, 1)) == "horizontal"

    def test_near_vertical(self):
        assert classify_orientation((0, 0), (1, 10)) == "vertical"

    def test_diagonal_tie_is_horizontal(self):
        assert classify_orientation((0, 0), (1, 1)) == "horizontal"

    def test_coincident_rejected(self):
        with pytest.raises(GeometryError):
            classify_orientation((2.0, 3.0), (2.0, 3.0))


class TestSliceLine:
    def test_diagonal_through_origin(self):
        # endpoints chosen so their images in this sub-image are (0,0), (1,1)
        # sub-centre c, lam=1: offset = c - p  ->  p = c - offset
        c = (100.0, 50.0)
        line = LFLine("horizontal", (c[0], c[0] - 1.0), (c[1], 1.0, c[1] - 1.0, 1.0))
        la, lb, lc = slice_line(line, c)
        assert la**2 + lb**2 == pytest.approx(1.0)
        assert abs(la + lb) == pytest.approx(0.0, abs=1e-12)  # x - y = 0 direction
        assert lc == pytest.approx(0.0, abs=1e-12)

    def test_degenerate_raises(self):
        line = LFLine("horizontal", (10.0, 10.0), (5.0, 0.0, 5.0, 0.0))
        with pytest.raises(DetectionError):
            slice_line(line, (30.0, 30.0))

    def test_passes_through_endpoint_projections(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            p1 = LFPoint(*rng.uniform(10, 400, 2), rng.uniform(-1.2, 1.2))
            p2 = LFPoint(*rng.uniform(10, 400, 2), rng.uniform(-1.2, 1.2))
            if abs(p1.lam) < 1e-3 or abs(p2.lam) < 1e-3:
                continue
            line = LFLine("horizontal", (p1.x, p2.x), (p1.y, p1.lam, p2.y, p2.lam))
            c = rng.uniform(50, 350, 2)
            try:
                la, lb, lc = slice_line(line, tuple(c))
            except DetectionError:
                continue
            for p in (p1, p2):
                ox = (c[0] - p.x) / p.lam
                oy = (c[1] - p.y) / p.lam
                assert abs(la * ox + lb * oy + lc) < 1e-9 * max(1.0, abs(ox), abs(oy))


class TestMakeTemplate:
    def _sub(self, radius=4.0):
        raw = RawImage(np.full((64, 64), 0.5))
        return SubImage(center=(32.0, 32.0), radius=radius, raw=raw)

    def test_line_outside_disc_is_empty(self):
        assert make_template((1.0, 0.0, 20.0), self._sub(), 1.0) is None

    def test_center_line_zero_mean_and_split(self):
        t = make_template((1.0, 0.0, 0.0), self._sub(), 1.0)
        assert t is not None
        assert abs(t.sum()) < 1e-10
        assert (t > 0).sum() == (t < 0).sum()

    def test_polarity_flips_sign(self):
        tp = make_template((0.0, 1.0, 1.5), self._sub(), 1.0)
        tm = make_template((0.0, 1.0, 1.5), self._sub(), -1.0)
        assert np.allclose(tp, -tm)


class TestTotalNCC:
    def test_self_correlation_is_one_per_term(self):
        rng = np.random.default_rng(9)
        img = rng.random((40, 40)) * 0.2 + 0.4
        raw0 = RawImage(img)
        sub = SubImage(center=(20.0, 20.0), radius=4.0, raw=raw0)
        t = make_template((0.6, 0.8, 0.5), sub, 1.0)
        off = sub.offsets()
        # embed the template pattern into the image at the window site
        img2 = img.copy()
        for (dx, dy), v in zip(off.astype(int), t):
            img2[20 + dy, 20 + dx] = 0.5 + 0.4 * v
        raw = RawImage(np.clip(img2, 0, 1))
        t4 = Template4D(centers=np.array([[20.0, 20.0]]), templates=(t,), offsets=off)
        assert total_ncc(t4, raw) == pytest.approx(1.0, abs=1e-9)

    def test_anticorrelation_is_minus_one(self):
        rng = np.random.default_rng(10)
        img = np.full((40, 40), 0.5)
        sub = SubImage(center=(20.0, 20.0), radius=4.0, raw=RawImage(img))
        t = make_template((0.6, 0.8, 0.5), sub, 1.0)
        off = sub.offsets()
        img2 = img.copy()
        for (dx, dy), v in zip(off.astype(int), t):
            img2[20 + dy, 20 + dx] = 0.5 - 0.4 * v
        t4 = Template4D(centers=np.array([[20.0, 20.0]]), templates=(t,), offsets=off)
        assert total_ncc(t4, RawImage(np.clip(img2, 0, 1))) == pytest.approx(-1.0, abs=1e-9)

    def test_flat_window_contributes_zero(self):
        img = RawImage(np.full((40, 40), 0.7))
        sub = SubImage(center=(20.0, 20.0), radius=4.0, raw=img)
        t = make_template((1.0, 0.0, 0.0), sub, 1.0)
        t4 = Template4D(centers=np.array([[20.0, 20.0]]), templates=(t,), offsets=sub.offsets())
        assert total_ncc(t4, img) == 0.0

    def test_empty_templates_skipped(self):
        img = RawImage(np.random.default_rng(1).random((40, 40)))
        t4 = Template4D(centers=np.array([[20.0, 20.0]]), templates=(None,), offsets=np.zeros((1, 2)))
        assert total_ncc(t4, img) == 0.0

    def test_terms_bounded(self, detection_scene):
        # score at ground truth stays within the number of sub-images
        gt = detection_scene["gt"]
        a, b = gt[(1, 0)], gt[(1, 4)]
        line = LFLine("horizontal", (a["x"], b["x"]), (a["y"], a["lam"], b["y"], b["lam"]))
        from lfcalib.detect import _segment_matcher

        m = _segment_matcher(
            detection_scene["img"], detection_scene["grid"], line, None, DetectorConfig(), n_cells=4
        )
        t4 = m.template4d(line)
        score = total_ncc(t4, detection_scene["img"])
        n_nonempty = sum(1 for t in t4.templates if t is not None)
        assert abs(score) <= n_nonempty + 1e-9


class TestIntersectLFLines:
    def test_constructed_intersection_recovered(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            q = LFPoint(*rng.uniform(50, 900, 2), rng.uniform(-1.2, 1.2))
            d1 = rng.normal(size=3) * [30.0, 3.0, 0.05]
            d2 = rng.normal(size=3) * [3.0, 30.0, 0.05]
            if abs(d1[0] * d2[1] - d1[1] * d2[0]) < 50.0:
                continue  # nearly parallel in the image plane
            h = LFLine(
                "horizontal",
                (q.x - d1[0], q.x + d1[0]),
                (q.y - d1[1], q.lam - d1[2], q.y + d1[1], q.lam + d1[2]),
            )
            v = LFLine(
                "vertical",
                (q.y - d2[1], q.y + d2[1]),
                (q.x - d2[0], q.lam - d2[2], q.x + d2[0], q.lam + d2[2]),
            )
            lp, resid = intersect_lf_lines(v, h)
            assert abs(lp.x - q.x) < 1e-9
            assert abs(lp.y - q.y) < 1e-9
            assert abs(lp.lam - q.lam) < 1e-9
            assert resid < 1e-9

    def test_same_line_twice_rejected(self):
        h = LFLine("horizontal", (0.0, 10.0), (0.0, 0.3, 5.0, 0.4))
        v = LFLine("vertical", (0.0, 5.0), (0.0, 0.3, 10.0, 0.4))
        # identical endpoints in (x, y, lam) space
        with pytest.raises(DetectionError):
            intersect_lf_lines(v, h)

    def test_coplanar_zero_disparity(self):
        h = LFLine("horizontal", (0.0, 10.0), (5.0, 0.0, 5.0, 0.0))
        v = LFLine("vertical", (0.0, 10.0), (5.0, 0.0, 5.0, 0.0))
        lp, _ = intersect_lf_lines(v, h)
        assert lp.lam == pytest.approx(0.0, abs=1e-12)
        assert lp.x == pytest.approx(5.0)
        assert lp.y == pytest.approx(5.0)

    def test_residual_threshold_enforced(self):
        h = LFLine("horizontal", (0.0, 10.0), (5.0, 0.1, 5.0, 0.1))
        v = LFLine("vertical", (0.0, 10.0), (5.2, 0.5, 5.2, 0.5))  # misses h
        with pytest.raises(DetectionError):
            intersect_lf_lines(v, h, residual_threshold=1e-6)

    def test_planes_contain_both_points(self):
        p1 = LFPoint(10.0, 20.0, 0.5)
        p2 = LFPoint(40.0, 25.0, 0.7)
        for plane in planes_through_lf_points(p1, p2):
            for p in (p1, p2):
                val = plane.a * p.x + plane.b * p.y + plane.c * p.lam + plane.d
                assert abs(val) < 1e-9


class TestSaddlesAndOrdering:
    def _cv_board(self, rows=4, cols=5, cell=7, margin=6, angle=0.06):
        n = max(rows, cols) * cell + 2 * margin + 6
        yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        ca, sa = np.cos(angle), np.sin(angle)
        u = (ca * (xx - margin) + sa * (yy - margin)) / cell
        v = (-sa * (xx - margin) + ca * (yy - margin)) / cell
        from scipy.ndimage import gaussian_filter

        img = np.where(
            (u >= -1) & (u <= cols) & (v >= -1) & (v <= rows),
            (np.floor(u) + np.floor(v)) % 2,
            0.5,
        )
        img = gaussian_filter(img.astype(float), 0.7)  # centre views are antialiased
        corners = []
        for i in range(rows):
            for j in range(cols):
                corners.append(
                    (margin + ca * j * cell - sa * i * cell, margin + sa * j * cell + ca * i * cell)
                )
        return img.astype(float), np.array(corners).reshape(rows, cols, 2)

    def test_detects_and_orders_full_board(self):
        img, gt = self._cv_board()
        pts, strengths = detect_saddle_corners(img, max_corners=40)
        grid, found = order_corner_grid(pts, strengths, 4, 5)
        assert found.all()
        # compare against ground truth allowing flips
        best = np.inf
        for gi in (gt, gt[::-1], gt[:, ::-1], gt[::-1, ::-1]):
            err = np.sqrt(((grid - gi) ** 2).sum(-1)).mean()
            best = min(best, err)
        assert best < 0.5

    def test_no_saddles_raises(self):
        with pytest.raises(DetectionError):
            detect_saddle_corners(np.full((30, 30), 0.5), max_corners=10)


class TestLineOps:
    def test_initial_line_close_to_truth(self, detection_scene):
        # with endpoint anchors of coarse-corner quality the shared-lambda
        # sweep lands within a step of the truth
        gt = detection_scene["gt"]
        a, b = gt[(1, 0)], gt[(1, 4)]
        line, warning = initial_lf_line(
            detection_scene["img"],
            detection_scene["grid"],
            (a["x"], a["y"]),
            (b["x"], b["y"]),
            n_cells=4,
        )
        assert warning is None
        assert line.params[1] == line.params[3]
        assert abs(line.params[1] - 0.5 * (a["lam"] + b["lam"])) < 0.055

    def test_refine_improves_and_is_monotone(self, detection_scene):
        gt = detection_scene["gt"]
        a, b = gt[(2, 0)], gt[(2, 4)]
        rng = np.random.default_rng(4)
        ca = np.array([a["x"], a["y"]]) + rng.normal(0, 1.0, 2)
        cb = np.array([b["x"], b["y"]]) + rng.normal(0, 1.0, 2)
        init, _ = initial_lf_line(
            detection_scene["img"], detection_scene["grid"], tuple(ca), tuple(cb), n_cells=4
        )
        res = refine_lf_line(init, detection_scene["img"], detection_scene["grid"], n_cells=4)
        assert np.all(np.diff(res.trace) >= 0)
        assert res.score >= res.trace[0]

    def test_refine_fixed_point_on_synthetic_objective(self):
        # a concave synthetic objective: starting at its maximizer returns it
        from lfcalib.detect import _pattern_search

        top = np.array([1.0, -0.5, 2.0, 0.25])

        def score(p):
            return -np.sum((np.asarray(p) - top) ** 2)

        x, best, trace, improved = _pattern_search(
            score, top, [0.5, 0.05, 0.5, 0.05], [1e-3, 1e-4, 1e-3, 1e-4], DetectorConfig()
        )
        assert np.allclose(x, top)
        assert not improved
        assert len(trace) == 1

    def test_refine_from_perturbed_start_converges(self):
        cam, grid = small_camera(), small_grid()
        board = rolled_board(z=480.0, roll=12.0, tilt=4.0)
        img = render(board, RenderConfig(cam=cam, grid=grid, samples_per_pixel=16), seed=2)
        gt = {(c["i"], c["j"]): c for c in analytic_corner_lf_points(board, cam)}
        a, b = gt[(1, 0)], gt[(1, 4)]
        true_params = (a["y"], a["lam"], b["y"], b["lam"])
        line = LFLine("horizontal", (a["x"], b["x"]), true_params)
        start = line.with_params(
            (a["y"] + 0.5, a["lam"] + 0.02, b["y"] - 0.5, b["lam"] - 0.02)
        )
        res = refine_lf_line(start, img, grid, n_cells=4)
        assert abs(res.line.params[0] - true_params[0]) < 0.05
        assert abs(res.line.params[2] - true_params[2]) < 0.05
        assert abs(res.line.params[1] - true_params[1]) < 0.01
        assert abs(res.line.params[3] - true_params[3]) < 0.01


class TestDetectBoard:
    def test_noise_free_accuracy(self, detection_scene):
        det = detect_board(
            detection_scene["img"], detection_scene["grid"], detection_scene["board"].spec
        )
        assert det.valid.sum() == det.rows * det.cols
        lat, lam, _ = match_to_gt(det, detection_scene["gt"])
        assert lat.mean() < 0.08
        assert lam.mean() < 0.005
        assert lam.max() < 0.01

    def test_noisy_detection(self):
        cam, grid = small_camera(), small_grid()
        board = rolled_board(z=520.0, roll=-9.0, tilt=5.0)
        cfg = RenderConfig(cam=cam, grid=grid, samples_per_pixel=16, noise_sigma=0.01)
        img = render(board, cfg, seed=12)
        gt = {(c["i"], c["j"]): c for c in analytic_corner_lf_points(board, cam)}
        det = detect_board(img, grid, board.spec, collect_traces=True)
        assert det.valid.sum() >= 0.95 * det.rows * det.cols
        lat, lam, _ = match_to_gt(det, gt)
        assert lat.mean() < 0.2
        for trace in det.diagnostics["traces"]:
            assert np.all(np.diff(trace) >= 0)

    def test_translation_equivariance(self):
        cam, grid = small_camera(), small_grid()
        board = rolled_board(z=520.0, roll=7.0, tilt=4.0, rows=3, cols=4)
        img = render(board, RenderConfig(cam=cam, grid=grid, samples_per_pixel=9), seed=5)
        det0 = detect_board(img, grid, board.spec)
        shift = 2 * grid.pitch  # integer pitches
        rolled = np.roll(np.roll(img.pixels, int(shift), axis=1), int(-shift), axis=0)
        det1 = detect_board(RawImage(rolled), grid, board.spec)
        both = det0.valid & det1.valid
        assert both.sum() >= 6
        dx = det1.points[both][:, 0] - det0.points[both][:, 0]
        dy = det1.points[both][:, 1] - det0.points[both][:, 1]
        dl = det1.points[both][:, 2] - det0.points[both][:, 2]
        assert np.allclose(dx, shift, atol=1e-9)
        assert np.allclose(dy, -shift, atol=1e-9)
        assert np.allclose(dl, 0.0, atol=1e-9)

    def test_occlusion_masks_affected_corners(self):
        cam, grid = small_camera(), small_grid()
        board = rolled_board(z=480.0, roll=8.0, tilt=5.0)
        img = render(board, RenderConfig(cam=cam, grid=grid, samples_per_pixel=9), seed=6)
        gt = {(c["i"], c["j"]): c for c in analytic_corner_lf_points(board, cam)}
        # occlude a vertical stripe covering one board edge
        xs = [gt[(i, j)]["x"] for i in range(4) for j in range(5)]
        x_edge = min(xs)
        occluded = img.pixels.copy()
        occluded[:, : int(x_edge + 15)] = 0.5
        det = detect_board(RawImage(occluded), grid, board.spec)
        assert not det.valid.all()
        assert det.valid.sum() >= 8
        lat, lam, _ = match_to_gt(det, gt)
        assert lat.mean() < 0.2


class TestCornerFiles:
    def test_round_trip(self, tmp_path, detection_scene):
        det = detect_board(
            detection_scene["img"], detection_scene["grid"], detection_scene["board"].spec
        )
        p = tmp_path / "corners.json"
        write_corner_file(p, det, image="img.pgm", board_spec=detection_scene["board"].spec,
                          config_hash="ff00")
        back = read_corner_file(p)
        assert back.rows == det.rows and back.cols == det.cols
        assert np.array_equal(back.valid, det.valid)
        ok = det.valid
        assert np.allclose(back.points[ok], det.points[ok])
        assert back.diagnostics["config_hash"] == "ff00"
