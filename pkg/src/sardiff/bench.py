"""Performance cases: row-wise rasterizer vs a per-pixel reference, scaling.

The per-pixel path below exists only for this benchmark: it renders each
range cell independently, re-running the whole sample pipeline per cell
the way a volume-style renderer would, and quantifies what batching a row
at a time buys. It is not part of the library surface.

Results are returned as rows of (case, metric, value, unit, runs) and
formatted as delimited text; every case is runnable through
``sardiff bench``.
"""

from __future__ import annotations

import tempfile
import time

import numpy as np

from .geometry import ViewGeometry, sample_line
from .oracle import make_views
from .renderer import RenderConfig, _forward_rows, render_image, shadow_scan
from .scene import make_synthetic_scene


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def render_row_per_pixel(line, view: ViewGeometry, cfg: RenderConfig) -> np.ndarray:
    """Reference path: each range cell evaluated independently.

    Re-derives slopes, gates and cross-sections for every cell, then keeps
    only that cell's contribution, mimicking per-pixel ray accumulation.
    """
    cfg = cfg.resolve(view)
    x = line.ground_range
    z = line.elevation
    b = line.backscatter
    alt = view.altitude
    out = np.empty(view.n_range)
    for m in range(view.n_range):
        eta = (z - alt) / x
        d = np.sqrt(x * x + (z - alt) ** 2)
        dx_ = np.diff(x)
        dz_ = np.diff(z)
        xm = 0.5 * (x[:-1] + x[1:])
        zm = 0.5 * (z[:-1] + z[1:])
        bm = 0.5 * (b[:-1] + b[1:])
        rm = np.sqrt(xm * xm + (zm - alt) ** 2)
        amp = bm * np.abs(-xm * dz_ + (zm - alt) * dx_) / rm
        vhat, _, _, _ = shadow_scan(eta, cfg.steepness, cfg.hard)
        r_lo = view.near_slant_range + m * view.slant_cell
        r_hi = r_lo + view.slant_cell
        from .renderer import cell_contribution
        w, _ = cell_contribution(d[:-1], d[1:], r_lo, r_hi,
                                 0.0 if cfg.hard else cfg.smoothing,
                                 cfg.eps_segment)
        out[m] = view.azimuth_spacing * float(np.sum(amp * vhat * w))
    return out


def bench_render(n_range: int = 256, repeats: int = 5) -> list[dict]:
    scene = make_synthetic_scene("gaussian_hills", 11, 128, 128, 1000.0,
                                 amplitude=50.0)
    view = make_views(*scene.center, 1000.0, 1, n_range=n_range, n_azimuth=16)[0]
    cfg = RenderConfig(samples=8 * n_range).resolve(view)
    line = sample_line(view, 0, cfg.samples, 0.0, cfg.margin, scene)

    def rowwise():
        _forward_rows(line.ground_range, line.elevation, line.backscatter,
                      view.altitude, view.near_slant_range, view.slant_cell,
                      view.azimuth_spacing, view.n_range, cfg)

    t_row = _median_time(rowwise, repeats)
    t_pixel = _median_time(lambda: render_row_per_pixel(line, view, cfg),
                           max(repeats // 2, 1))

    cfg2 = RenderConfig(samples=16 * n_range).resolve(view)
    line2 = sample_line(view, 0, cfg2.samples, 0.0, cfg2.margin, scene)

    def rowwise2():
        _forward_rows(line2.ground_range, line2.elevation, line2.backscatter,
                      view.altitude, view.near_slant_range, view.slant_cell,
                      view.azimuth_spacing, view.n_range, cfg2)

    t_row2 = _median_time(rowwise2, repeats)
    cfg_hard = RenderConfig(samples=8 * n_range, hard=True).resolve(view)
    t_hard = _median_time(lambda: render_image(scene, view, cfg_hard), 1)
    t_smooth = _median_time(lambda: render_image(scene, view, cfg), 1)

    return [
        {"case": "render", "metric": "rowwise_rows_per_s", "value": 1.0 / t_row,
         "unit": "rows/s", "runs": repeats},
        {"case": "render", "metric": "perpixel_rows_per_s", "value": 1.0 / t_pixel,
         "unit": "rows/s", "runs": max(repeats // 2, 1)},
        {"case": "render", "metric": "rowwise_speedup", "value": t_pixel / t_row,
         "unit": "x", "runs": repeats},
        {"case": "render", "metric": "k_doubling_cost", "value": t_row2 / t_row,
         "unit": "x", "runs": repeats},
        {"case": "render", "metric": "hard_vs_smooth", "value": t_hard / t_smooth,
         "unit": "x", "runs": 1},
    ]


def bench_train(repeats: int = 3) -> list[dict]:
    from .dataset import load_dataset
    from .field import FieldConfig, HashEncodingConfig, NeuralSurfaceField
    from .oracle import OracleConfig, make_dataset
    from .training import (AdamOptimizer, TrainConfig, _learning_rates,
                           schedule_step, train_step)

    with tempfile.TemporaryDirectory() as td:
        scene = make_synthetic_scene("gaussian_hills", 11, 64, 64, 1000.0,
                                     amplitude=40.0)
        views = make_views(*scene.center, 1000.0, 2, n_range=64, n_azimuth=64)
        manifest = make_dataset(scene, views, OracleConfig(seed=1), td)
        dataset = load_dataset(manifest)
        field = NeuralSurfaceField(FieldConfig(
            box_side=1000.0,
            encoding=HashEncodingConfig(levels=8, table_size=1 << 13)))
        cfg = TrainConfig(iterations=100, rows_per_batch=32, beta0=4.0,
                          anneal_fraction=0.5).resolve(dataset)
        opt = AdamOptimizer(field.params, _learning_rates(field, cfg))

        def run_phase(t):
            state = schedule_step(cfg, t)
            rng = np.random.default_rng([cfg.seed, t])
            step = train_step(field, dataset, cfg, state, rng)
            opt.step(step["grads"])

        # warm-up then timed samples at the coarse and fine ends of the anneal
        run_phase(0)
        t_coarse = _median_time(lambda: run_phase(1), repeats)
        t_fine = _median_time(lambda: run_phase(99), repeats)
    return [
        {"case": "train", "metric": "coarse_iters_per_s", "value": 1.0 / t_coarse,
         "unit": "it/s", "runs": repeats},
        {"case": "train", "metric": "fine_iters_per_s", "value": 1.0 / t_fine,
         "unit": "it/s", "runs": repeats},
        {"case": "train", "metric": "coarse_speedup", "value": t_fine / t_coarse,
         "unit": "x", "runs": repeats},
    ]


def run_cases(case: str = "all", n_range: int = 256, repeats: int = 5) -> list[dict]:
    rows = []
    if case in ("render", "all"):
        rows += bench_render(n_range=n_range, repeats=repeats)
    if case in ("train", "all"):
        rows += bench_train(repeats=min(repeats, 3))
    return rows


def format_rows(rows: list[dict]) -> str:
    lines = ["case,metric,value,unit,runs"]
    for r in rows:
        lines.append(f"{r['case']},{r['metric']},{r['value']:.4f},{r['unit']},{r['runs']}")
    return "\n".join(lines) + "\n"
