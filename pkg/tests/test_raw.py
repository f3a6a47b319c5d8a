import math

import numpy as np
import pytest

from lfcalib.errors import EstimationError, InputError
from lfcalib.raw import (
    DatasetManifest,
    MicroLensGrid,
    RawImage,
    bilinear_sample,
    center_view_image,
    estimate_grid_from_white_image,
    lens_center,
    load_manifest,
    nearest_lens,
    read_image,
    write_pgm,
    write_png,
)
from lfcalib.render import render_white_image


class TestRawImage:
    def test_rejects_out_of_range(self):
        with pytest.raises(InputError):
            RawImage(np.full((4, 4), 1.5))

    def test_rejects_empty(self):
        with pytest.raises(InputError):
            RawImage(np.zeros((0, 4)))

    def test_shape_properties(self):
        img = RawImage(np.zeros((3, 7)))
        assert (img.width, img.height) == (7, 3)


class TestLensCenter:
    def test_rect_origin(self):
        g = MicroLensGrid("rectangular", 10.0, 0.0, (0.0, 0.0), 5, 5)
        assert lens_center(g, 0, 0) == (0.0, 0.0)

    def test_rect_hand_evaluated(self):
        g = MicroLensGrid("rectangular", 10.0, 0.0, (0.0, 0.0), 5, 5)
        assert lens_center(g, 2, 3) == (30.0, 20.0)

    def test_hex_hand_evaluated(self):
        g = MicroLensGrid("hexagonal", 10.0, 0.0, (0.0, 0.0), 5, 5)
        x, y = lens_center(g, 1, 0)
        assert x == pytest.approx(5.0)
        assert y == pytest.approx(10.0 * math.sqrt(3) / 2)

    def test_out_of_range(self):
        g = MicroLensGrid("rectangular", 10.0, 0.0, (0.0, 0.0), 5, 5)
        with pytest.raises(InputError):
            lens_center(g, 5, 0)

    def test_rotation(self):
        g = MicroLensGrid("rectangular", 10.0, math.pi / 2, (0.0, 0.0), 5, 5)
        x, y = lens_center(g, 0, 1)
        assert x == pytest.approx(0.0, abs=1e-12)
        assert y == pytest.approx(10.0)


class TestNearestLens:
    def test_fixed_point(self):
        g = MicroLensGrid("rectangular", 10.0, 0.02, (3.0, 5.0), 7, 9)
        for i, j in [(0, 0), (3, 4), (6, 8)]:
            assert nearest_lens(g, lens_center(g, i, j)) == (i, j)

    def test_midpoint_tie_break(self):
        g = MicroLensGrid("rectangular", 10.0, 0.0, (0.0, 0.0), 5, 5)
        assert nearest_lens(g, (5.0, 0.0)) == (0, 0)
        assert nearest_lens(g, (0.0, 5.0)) == (0, 0)

    @pytest.mark.parametrize("layout", ["rectangular", "hexagonal"])
    def test_matches_brute_force(self, layout):
        g = MicroLensGrid(layout, 8.0, 0.015, (2.0, 3.0), 6, 7)
        cs = g.centers().reshape(-1, 2)
        rng = np.random.default_rng(42)
        pts = rng.uniform(-5.0, 60.0, size=(200, 2))
        for p in pts:
            d = np.sum((cs - p) ** 2, axis=1)
            expected = divmod(int(np.argmin(d)), g.cols)
            got = nearest_lens(g, tuple(p))
            assert np.isclose(d[got[0] * g.cols + got[1]], d.min())
            assert got == expected or np.isclose(
                d[expected[0] * g.cols + expected[1]],
                d[got[0] * g.cols + got[1]],
            )

    def test_grid_round_trip_all_indices(self):
        g = MicroLensGrid("hexagonal", 7.0, -0.01, (4.0, 4.0), 9, 9)
        for i in range(g.rows):
            for j in range(g.cols):
                assert nearest_lens(g, lens_center(g, i, j)) == (i, j)


class TestBilinear:
    def test_exact_on_lattice(self):
        rng = np.random.default_rng(0)
        img = rng.random((6, 6))
        assert bilinear_sample(img, 3.0, 2.0) == img[2, 3]

    def test_interpolates_linearly(self):
        img = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert bilinear_sample(img, 0.25, 0.5) == pytest.approx(0.25)


class TestCenterView:
    def test_constant_image(self):
        g = MicroLensGrid("rectangular", 5.0, 0.0, (2.0, 2.0), 4, 4)
        raw = RawImage(np.full((20, 20), 0.4))
        cv = center_view_image(raw, g)
        assert cv.shape == (4, 4)
        assert np.allclose(cv, 0.4)

    def test_single_lens(self):
        g = MicroLensGrid("rectangular", 5.0, 0.0, (2.0, 2.0), 1, 1)
        raw = RawImage(np.arange(25.0).reshape(5, 5) / 24.0)
        cv = center_view_image(raw, g)
        assert cv.shape == (1, 1)
        assert cv[0, 0] == raw.pixels[2, 2]

    def test_sampling_exact_on_integer_centers(self):
        g = MicroLensGrid("rectangular", 5.0, 0.0, (2.0, 2.0), 3, 3)
        rng = np.random.default_rng(1)
        raw = RawImage(rng.random((20, 20)))
        cv = center_view_image(raw, g)
        for i in range(3):
            for j in range(3):
                assert cv[i, j] == raw.pixels[2 + 5 * i, 2 + 5 * j]


class TestGridEstimation:
    def test_recovers_generating_grid(self):
        g = MicroLensGrid("rectangular", 9.0, 0.0, (5.0, 5.0), 24, 24)
        fit = estimate_grid_from_white_image(render_white_image(g))
        assert fit.grid.pitch == pytest.approx(9.0, abs=0.01)
        assert abs(fit.grid.rotation) < 1e-4
        assert fit.grid.origin[0] == pytest.approx(5.0, abs=0.05)
        assert fit.grid.origin[1] == pytest.approx(5.0, abs=0.05)
        assert fit.grid.rows >= 22 and fit.grid.cols >= 22

    def test_recovers_rotation_sign(self):
        g = MicroLensGrid("rectangular", 9.0, 0.01, (8.0, 8.0), 24, 24)
        fit = estimate_grid_from_white_image(render_white_image(g))
        assert fit.grid.rotation == pytest.approx(0.01, abs=1e-4)

    def test_pitch_relative_error(self):
        g = MicroLensGrid("rectangular", 9.25, -0.004, (6.0, 7.0), 22, 22)
        fit = estimate_grid_from_white_image(render_white_image(g))
        assert abs(fit.grid.pitch - 9.25) / 9.25 < 1e-3

    def test_hexagonal_recovery(self):
        g = MicroLensGrid("hexagonal", 10.0, 0.0, (6.0, 6.0), 20, 20)
        fit = estimate_grid_from_white_image(render_white_image(g), layout="hexagonal")
        assert fit.grid.pitch == pytest.approx(10.0, abs=0.02)
        assert abs(fit.grid.rotation) < 2e-4

    def test_uniform_image_fails(self):
        with pytest.raises(EstimationError):
            estimate_grid_from_white_image(RawImage(np.full((50, 50), 0.8)))


class TestImageIO:
    @pytest.mark.parametrize("maxval", [255, 65535])
    def test_pgm_round_trip(self, tmp_path, maxval):
        rng = np.random.default_rng(3)
        img = RawImage(rng.random((7, 5)))
        p = tmp_path / "t.pgm"
        write_pgm(p, img, maxval=maxval, comment="config:abc")
        back = read_image(p)
        assert back.pixels.shape == (7, 5)
        assert np.max(np.abs(back.pixels - img.pixels)) <= 0.5 / maxval + 1e-12

    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        img = RawImage(rng.random((6, 9)))
        p = tmp_path / "t.png"
        write_png(p, img)
        back = read_image(p)
        assert np.max(np.abs(back.pixels - img.pixels)) <= 0.5 / 65535 + 1e-12

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            read_image(tmp_path / "nope.pgm")


class TestManifest:
    def test_round_trip(self, tmp_path):
        g = MicroLensGrid("rectangular", 9.0, 0.0, (4.0, 4.0), 8, 8)
        m = DatasetManifest(
            images=("a.pgm", "b.pgm"),
            board={"rows": 5, "cols": 6, "cell_size": 45.0},
            white_image="white.pgm",
            grid=g,
            sidecars=("a.json",),
            config_hash="deadbeef",
        )
        p = tmp_path / "manifest.json"
        import json

        p.write_text(json.dumps(m.to_dict()))
        back = load_manifest(p)
        assert back == m

    def test_malformed(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text("{}")
        with pytest.raises(InputError):
            load_manifest(p)
