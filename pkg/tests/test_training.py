import numpy as np
import pytest

from sardiff.dataset import SarDataset, load_dataset
from sardiff.field import FieldConfig, HashEncodingConfig, NeuralSurfaceField
from sardiff.oracle import OracleConfig, make_dataset, make_views
from sardiff.scene import make_synthetic_scene
from sardiff.training import (AdamOptimizer, TrainConfig, clip_gradients, fit,
                              schedule_step, speckle_nll, speckle_nll_grad,
                              train_step, tv_grad, tv_penalty)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    td = tmp_path_factory.mktemp("data")
    scene = make_synthetic_scene("flat_ramp", 0, 32, 32, 1000.0, ramp_slope=0.02)
    views = make_views(*scene.center, 1000.0, 1, n_range=32, n_azimuth=32)
    manifest = make_dataset(scene, views, OracleConfig(looks=1, seed=9,
                                                       supersampling=8), td)
    return load_dataset(manifest)


def tiny_field(dataset, seed=0):
    return NeuralSurfaceField(FieldConfig(
        box_x0=dataset.box_x0, box_y0=dataset.box_y0, box_side=dataset.box_side,
        encoding=HashEncodingConfig(levels=6, table_size=2 ** 12)), seed=seed)


class TestSpeckleNll:
    def test_equal_gives_one(self, rng):
        i = rng.uniform(1, 10, (8, 16))
        assert speckle_nll(i, i) == pytest.approx(1.0, abs=1e-12)

    def test_scaled_by_e(self, rng):
        i = rng.uniform(1, 10, (4, 4))
        val = speckle_nll(np.e * i, i)
        assert val == pytest.approx(1.0 + 1.0 / np.e, abs=1e-12)

    def test_minimized_at_match(self, rng):
        obs = rng.uniform(1, 10, 64)
        base = speckle_nll(obs, obs)
        for scale in (0.5, 0.9, 1.1, 2.0):
            assert speckle_nll(scale * obs, obs) > base

    def test_at_least_one_iff_equal(self, rng):
        for _ in range(50):
            pred = rng.uniform(0.1, 10, 32)
            obs = rng.uniform(0.1, 10, 32)
            val = speckle_nll(pred, obs)
            assert val >= 1.0 - 1e-12
        mismatch = speckle_nll(rng.uniform(1, 2, 32), rng.uniform(3, 4, 32))
        assert mismatch > 1.0

    def test_gradient_matches_fd(self, rng):
        pred = rng.uniform(0.5, 5, 24)
        obs = rng.uniform(0.5, 5, 24)
        g = speckle_nll_grad(pred, obs)
        for i in range(0, 24, 5):
            h = 1e-6
            p_hi = pred.copy(); p_hi[i] += h
            p_lo = pred.copy(); p_lo[i] -= h
            fd = (speckle_nll(p_hi, obs) - speckle_nll(p_lo, obs)) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-10)

    def test_rejects_nonpositive_observation(self):
        with pytest.raises(ValueError):
            speckle_nll(np.ones(4), np.array([1.0, 0.0, 2.0, 3.0]))

    def test_speckle_calibration_monte_carlo(self):
        # empirical loss over 1-look speckle is minimized at scale 1
        rng = np.random.default_rng(77)
        truth = rng.uniform(1.0, 5.0, 1_000_000)
        obs = truth * rng.exponential(1.0, truth.size)
        scales = np.linspace(0.9, 1.1, 41)
        losses = [speckle_nll(s * truth, obs) for s in scales]
        best = scales[int(np.argmin(losses))]
        assert abs(best - 1.0) <= 0.02


class TestTvPenalty:
    def test_constant_zero(self):
        assert tv_penalty(np.full((3, 9), 4.2)) == 0.0

    def test_alternating(self):
        b = np.array([[1.0, 2.0, 1.0, 2.0]])
        assert tv_penalty(b) == pytest.approx(1.0)

    def test_homogeneous(self, rng):
        b = rng.uniform(0, 2, (5, 17))
        assert tv_penalty(3.0 * b) == pytest.approx(3.0 * tv_penalty(b))

    def test_grad_matches_fd(self, rng):
        b = rng.uniform(0.5, 2.0, (3, 9))
        g = tv_grad(b)
        for idx in [(0, 0), (1, 4), (2, 8)]:
            h = 1e-7
            hi = b.copy(); hi[idx] += h
            lo = b.copy(); lo[idx] -= h
            fd = (tv_penalty(hi) - tv_penalty(lo)) / (2 * h)
            assert g[idx] == pytest.approx(fd, abs=1e-8)

    def test_noise_increases_penalty(self, rng):
        smooth = np.linspace(1, 2, 33)[None, :].repeat(4, axis=0)
        noisy = smooth + rng.normal(0, 0.2, smooth.shape)
        assert tv_penalty(noisy) > tv_penalty(smooth)


class TestSchedule:
    def cfg(self, dataset):
        return TrainConfig(iterations=1000, beta0=4.0,
                           anneal_fraction=0.5).resolve(dataset)

    def test_boundaries(self, tiny_dataset):
        cfg = self.cfg(tiny_dataset)
        s0 = schedule_step(cfg, 0)
        assert s0.beta == pytest.approx(4.0)
        s_end = schedule_step(cfg, 500)
        assert s_end.beta == pytest.approx(1.0)
        assert s_end.samples == cfg.samples_target
        assert s_end.smoothing == pytest.approx(cfg.smoothing_target)
        assert schedule_step(cfg, 1000).beta == 1.0

    def test_geometric_midpoint(self, tiny_dataset):
        cfg = self.cfg(tiny_dataset)
        mid = schedule_step(cfg, 250)
        assert mid.beta == pytest.approx(2.0)
        assert mid.samples == round(cfg.samples_target / 2)
        assert mid.smoothing == pytest.approx(2.0 * cfg.smoothing_target)

    def test_monotone(self, tiny_dataset):
        cfg = self.cfg(tiny_dataset)
        states = [schedule_step(cfg, t) for t in range(0, 1001, 25)]
        ks = [s.samples for s in states]
        mus = [s.smoothing for s in states]
        assert all(a <= b for a, b in zip(ks, ks[1:]))
        assert all(a >= b for a, b in zip(mus, mus[1:]))

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(beta0=0.5)
        with pytest.raises(ValueError):
            TrainConfig(tv_weight=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(samples_target=1)


class TestAdam:
    def test_moves_toward_minimum(self):
        params = {"x": np.array([5.0])}
        opt = AdamOptimizer(params, {"x": 0.1})
        for _ in range(400):
            opt.step({"x": 2.0 * params["x"]})
        assert abs(params["x"][0]) < 1e-2

    def test_clip_gradients(self):
        grads = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
        norm = clip_gradients(grads, 6.5)
        assert norm == pytest.approx(13.0)
        assert np.hypot(np.hypot(*grads["a"]), grads["b"][0]) == pytest.approx(6.5)
        untouched = {"a": np.array([0.3])}
        clip_gradients(untouched, 10.0)
        assert untouched["a"][0] == 0.3


class TestTrainStep:
    def test_stationary_at_perfect_fit(self, tiny_dataset):
        # replace observations by the field's own render: gradient ~ 0
        field = tiny_field(tiny_dataset, seed=3)
        cfg = TrainConfig(iterations=10, rows_per_batch=8, tv_weight=0.0,
                          seed=0).resolve(tiny_dataset)
        state = schedule_step(cfg, 9)  # beta = 1
        rng = np.random.default_rng(5)

        from sardiff.adjoint import RowBatchTape
        from sardiff.geometry import line_positions
        from sardiff.renderer import RenderConfig

        # build a self-consistent dataset on the fly
        images = []
        for view in tiny_dataset.views:
            xs, zs, bs, spacings = [], [], [], []
            for a in range(view.n_azimuth):
                gr, world, s = line_positions(view, a, state.samples, 0.0, cfg.margin)
                z, b = field.forward(world, spacing=np.full(len(world), max(s,
                                     cfg.window_floor_factor * tiny_dataset.ground_cell)))
                xs.append(gr); zs.append(z); bs.append(b)
            tape = RowBatchTape(np.stack(xs), np.stack(zs), np.stack(bs),
                                view.altitude, view.near_slant_range,
                                view.slant_cell, view.azimuth_spacing,
                                view.n_range,
                                RenderConfig(smoothing=state.smoothing,
                                             steepness=state.steepness,
                                             samples=state.samples).resolve(view))
            images.append(np.maximum(tape.intensity, 1e-9))
        self_ds = SarDataset(views=tiny_dataset.views, images=images,
                             manifest_dir=tiny_dataset.manifest_dir,
                             ground_truth_path=None,
                             box_x0=tiny_dataset.box_x0, box_y0=tiny_dataset.box_y0,
                             box_side=tiny_dataset.box_side,
                             ground_cell=tiny_dataset.ground_cell)

        class NoJitter:
            def __init__(self, inner): self.inner = inner
            def integers(self, *a, **k): return self.inner.integers(*a, **k)
            def uniform(self, lo, hi, size=None): return np.zeros(size)

        step = train_step(field, self_ds, cfg, state, NoJitter(rng))
        assert step["loss_data"] == pytest.approx(1.0, abs=1e-6)
        gnorm = np.sqrt(sum(float((g ** 2).sum()) for g in step["grads"].values()))
        assert gnorm < 1e-4

    def test_deterministic_given_seed(self, tiny_dataset):
        results = []
        for _ in range(2):
            field = tiny_field(tiny_dataset, seed=4)
            cfg = TrainConfig(iterations=6, rows_per_batch=8, seed=11)
            metrics = fit(field, tiny_dataset, cfg)
            results.append([m["loss_data"] for m in metrics])
        assert results[0] == results[1]

    def test_nonfinite_loss_aborts_with_rows(self, tiny_dataset):
        field = tiny_field(tiny_dataset, seed=4)
        field.params["tables"][...] = np.nan
        cfg = TrainConfig(iterations=2, rows_per_batch=4, seed=0).resolve(tiny_dataset)
        with pytest.raises(RuntimeError, match="offending"):
            train_step(field, tiny_dataset, cfg, schedule_step(cfg, 0),
                       np.random.default_rng(0))


class TestFit:
    def test_zero_iterations_returns_unchanged(self, tiny_dataset):
        field = tiny_field(tiny_dataset, seed=6)
        before = field.params_vector().copy()
        metrics = fit(field, tiny_dataset, TrainConfig(iterations=0))
        assert metrics == []
        np.testing.assert_array_equal(field.params_vector(), before)

    def test_one_metrics_row_per_iteration(self, tiny_dataset, tmp_path):
        field = tiny_field(tiny_dataset, seed=6)
        metrics = fit(field, tiny_dataset,
                      TrainConfig(iterations=5, rows_per_batch=4, seed=2),
                      out_dir=tmp_path)
        assert len(metrics) == 5
        assert [m["iteration"] for m in metrics] == list(range(5))
        lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 6  # header + 5 rows
        assert (tmp_path / "checkpoint.sarf").exists()

    def test_smoke_loss_decreases(self, tiny_dataset):
        field = tiny_field(tiny_dataset, seed=1)
        cfg = TrainConfig(iterations=500, rows_per_batch=16, seed=7,
                          lr_tables=3e-3, lr_mlp=1e-3)
        metrics = fit(field, tiny_dataset, cfg)
        first = np.mean([m["loss_data"] for m in metrics[:20]])
        last = np.mean([m["loss_data"] for m in metrics[-20:]])
        assert last < first
