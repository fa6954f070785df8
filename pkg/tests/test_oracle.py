import json

import numpy as np
import pytest

from conftest import build_view, flat_earth_intensity
from sardiff.oracle import (OracleConfig, add_speckle, make_dataset, make_views,
                            mean_ground_cell, oracle_render, raycast_visibility)
from sardiff.renderer import RenderConfig, render_image
from sardiff.scene import make_synthetic_scene, read_intensity


@pytest.fixture(scope="module")
def hills():
    return make_synthetic_scene("gaussian_hills", 7, 64, 64, 1000.0, amplitude=40.0)


class TestOracleRender:
    def test_flat_scene_closed_form(self):
        scene = make_synthetic_scene("flat_ramp", 0, 32, 32, 9000.0, ramp_slope=0.0)
        view = build_view(n_range=48, n_azimuth=2,
                          ref=(4500.0 - 3000.0, 4500.0))
        img = oracle_render(scene, view, OracleConfig(supersampling=16))
        expected = flat_earth_intensity(view)
        rel = np.abs(img[0] - expected) / expected
        assert rel.max() < 0.005

    def test_zero_backscatter_zero_image(self):
        scene = make_synthetic_scene("flat_ramp", 0, 16, 16, 9000.0, ramp_slope=0.0)
        zeroed = type(scene)(scene.rows, scene.cols, scene.x0, scene.y0,
                             scene.dx, scene.dy, scene.elevation,
                             np.zeros_like(scene.backscatter))
        view = build_view(n_range=16, n_azimuth=2, ref=(1500.0, 4500.0))
        img = oracle_render(zeroed, view, OracleConfig(supersampling=8))
        assert np.all(img == 0.0)

    def test_renderer_matches_oracle_on_hills(self, hills):
        view = make_views(*hills.center, 1000.0, 1, incidence_deg=45,
                          n_range=96, n_azimuth=48)[0]
        oracle = oracle_render(hills, view, OracleConfig(supersampling=24))
        fast = render_image(hills, view, RenderConfig(hard=True, samples=16 * 96))
        sig = oracle >= 0.01 * oracle.max()
        rel = np.abs(fast - oracle)[sig] / oracle[sig]
        assert rel.max() <= 0.01

    def test_footprint_not_covered(self, hills):
        view = make_views(20_000.0, 20_000.0, 1000.0, 1, n_range=32,
                          n_azimuth=8)[0]
        with pytest.raises(ValueError, match="footprint not covered"):
            oracle_render(hills, view, OracleConfig(supersampling=8))

    def test_power_cosine_dims_slopes(self, hills):
        view = make_views(*hills.center, 1000.0, 1, n_range=48, n_azimuth=24)[0]
        cosine = oracle_render(hills, view, OracleConfig(supersampling=8))
        squared = oracle_render(hills, view, OracleConfig(
            supersampling=8, material="power_cosine", material_exponent=2.0))
        # |u.n| < 1 nearly everywhere, so the squared law is strictly dimmer
        assert np.all(squared <= cosine + 1e-12)
        assert squared.sum() < 0.95 * cosine.sum()


class TestRaycast:
    def test_flat_all_lit(self):
        xs = np.linspace(100, 5000, 300)
        lit, _ = raycast_visibility(xs, np.zeros_like(xs), 3000.0)
        assert lit.all()

    def test_wall_shadow_within_one_sample(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            h_sensor = rng.uniform(2000.0, 5000.0)
            x_wall = rng.uniform(1800.0, 3500.0)
            height = rng.uniform(30.0, 0.25 * h_sensor)
            spacing = 1.0
            xs = np.arange(1000.0, 8000.0, spacing)
            xs = xs + (x_wall - xs[np.argmin(np.abs(xs - x_wall))])
            z = np.where(np.abs(xs - x_wall) < 0.25 * spacing, height, 0.0)
            lit, _ = raycast_visibility(xs, z, h_sensor)
            shadow_end = x_wall * h_sensor / (h_sensor - height)
            dark = xs[~lit]
            assert dark.size > 0
            assert abs(dark.max() - shadow_end) <= 1.5 * spacing
            assert abs(dark.min() - x_wall) <= 1.5 * spacing

    def test_batched_rows(self):
        xs = np.tile(np.linspace(100, 5000, 300), (4, 1))
        z = np.zeros_like(xs)
        z[2, 100] = 500.0
        lit, _ = raycast_visibility(xs, z, 3000.0)
        assert lit[0].all() and lit[1].all() and lit[3].all()
        assert not lit[2, 101:120].any()


class TestSpeckle:
    def test_unit_mean(self):
        noisy = add_speckle(np.ones(1_000_000), looks=1, seed=3)
        assert noisy.mean() == pytest.approx(1.0, abs=0.01)

    def test_single_look_variance(self):
        noisy = add_speckle(np.ones(1_000_000), looks=1, seed=4)
        assert noisy.var() == pytest.approx(1.0, abs=0.02)

    def test_multilook_variance_shrinks(self):
        noisy = add_speckle(np.ones(200_000), looks=4, seed=5)
        assert noisy.var() == pytest.approx(0.25, abs=0.01)

    def test_zeros_stay_zero(self):
        img = np.zeros((10, 10))
        img[3, 4] = 2.0
        noisy = add_speckle(img, looks=1, seed=6)
        assert np.all(noisy[img == 0] == 0.0)

    def test_deterministic(self):
        a = add_speckle(np.ones(100), looks=2, seed=7)
        b = add_speckle(np.ones(100), looks=2, seed=7)
        np.testing.assert_array_equal(a, b)

    def test_invalid_looks(self):
        with pytest.raises(ValueError):
            add_speckle(np.ones(4), looks=0, seed=0)


class TestMakeDataset:
    def test_ascending_descending_pair(self, hills, tmp_path):
        views = make_views(*hills.center, 1000.0, 2, n_range=32, n_azimuth=16)
        assert views[1].heading - views[0].heading == pytest.approx(np.pi)
        manifest = make_dataset(hills, views, OracleConfig(supersampling=8, seed=1),
                                tmp_path)
        meta = json.loads(manifest.read_text())
        assert len(meta["views"]) == 2
        for entry in meta["views"]:
            img = read_intensity(tmp_path / entry["intensity"])
            assert img.shape == (16, 32)

    def test_empty_views_rejected(self, hills, tmp_path):
        with pytest.raises(ValueError):
            make_dataset(hills, [], OracleConfig(), tmp_path)

    def test_regeneration_byte_identical(self, hills, tmp_path):
        views = make_views(*hills.center, 1000.0, 1, n_range=24, n_azimuth=8)
        cfg = OracleConfig(supersampling=8, seed=12)
        d1 = tmp_path / "one"
        d2 = tmp_path / "two"
        make_dataset(hills, views, cfg, d1)
        make_dataset(hills, views, cfg, d2)
        for name in sorted(p.name for p in d1.iterdir()):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name

    def test_ground_cell_recorded(self, hills, tmp_path):
        views = make_views(*hills.center, 1000.0, 1, n_range=24, n_azimuth=8)
        manifest = make_dataset(hills, views, OracleConfig(supersampling=8), tmp_path)
        meta = json.loads(manifest.read_text())
        assert meta["ground_cell_m"] == pytest.approx(mean_ground_cell(views[0]))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OracleConfig(supersampling=2)
        with pytest.raises(ValueError):
            OracleConfig(looks=0)
        with pytest.raises(ValueError):
            OracleConfig(material="mangia")
