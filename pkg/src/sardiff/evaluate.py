"""DSM extraction and masked quantitative evaluation.

The protocol: materialize the learned surface on the reference grid,
restrict scoring to cells that are emerged (reference elevation above the
water level) and imaged by at least two views (in-swath and not occluded,
by hard ray casting), and report the root mean square elevation error
over that mask.

Report output is delimited text; optional figure panels and grayscale
exports are rendered with matplotlib (agg backend) next to it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import NeuralSurfaceField
from .geometry import ViewGeometry, swath_footprint
from .oracle import raycast_visibility
from .scene import SceneRaster


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    x0: float
    y0: float
    dx: float
    dy: float

    @classmethod
    def like(cls, raster: SceneRaster) -> "GridSpec":
        return cls(raster.rows, raster.cols, raster.x0, raster.y0,
                   raster.dx, raster.dy)


@dataclass
class EvalMask:
    """Per-cell evaluation flags; the score runs over emerged AND overlap."""

    emerged: np.ndarray
    overlap: np.ndarray

    @property
    def combined(self) -> np.ndarray:
        return self.emerged & self.overlap


def extract_dsm(field: NeuralSurfaceField, grid: GridSpec) -> SceneRaster:
    """Materialize the field on a grid (full-frequency, all windows open)."""
    xs = grid.x0 + np.arange(grid.cols) * grid.dx
    ys = grid.y0 + np.arange(grid.rows) * grid.dy
    xx, yy = np.meshgrid(xs, ys)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    z, b = field.query(pts)
    return SceneRaster(grid.rows, grid.cols, grid.x0, grid.y0, grid.dx, grid.dy,
                       z.reshape(grid.rows, grid.cols),
                       b.reshape(grid.rows, grid.cols))


def visibility_mask(raster: SceneRaster, view: ViewGeometry,
                    profile_samples: int = 256, block: int = 4096) -> np.ndarray:
    """Cells of ``raster`` imaged by ``view``: in-swath and ray-cast lit.

    Each grid node is tested along its own zero-doppler line with a
    uniform ladder of ``profile_samples`` terrain samples between the
    ground track and the node, so occluders are resolved down to roughly
    the swath width divided by the ladder length.
    """
    xs = raster.x0 + np.arange(raster.cols) * raster.dx
    ys = raster.y0 + np.arange(raster.rows) * raster.dy
    xx, yy = np.meshgrid(xs, ys)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)

    ref = np.array([view.ref_x, view.ref_y])
    rel = pts - ref
    along = rel @ view.flight_dir
    ground = rel @ view.ground_dir
    x_near, x_far = swath_footprint(view)
    in_swath = ((ground >= x_near) & (ground <= x_far)
                & (along >= 0.0) & (along <= (view.n_azimuth - 1) * view.azimuth_spacing))

    lit = np.zeros(pts.shape[0], dtype=bool)
    idx = np.nonzero(in_swath)[0]
    start = max(x_near - 0.5 * (x_far - x_near), 1.0)
    for lo in range(0, idx.size, block):
        sel = idx[lo:lo + block]
        n = sel.size
        # Per-node ladder from the shadow margin out to the node itself.
        frac = np.linspace(0.0, 1.0, profile_samples)[None, :]
        s = start + (ground[sel, None] - start) * frac
        track = pts[sel] - ground[sel, None] * view.ground_dir[None, :]
        prof_pts = track[:, None, :] + s[:, :, None] * view.ground_dir[None, None, :]
        z, _ = raster.query(prof_pts.reshape(-1, 2))
        z = z.reshape(n, profile_samples)
        node_lit, _ = raycast_visibility(s, z, np.full(n, view.altitude))
        lit[sel] = node_lit[:, -1]
    return lit.reshape(raster.rows, raster.cols)


def build_eval_mask(reference: SceneRaster, views: list[ViewGeometry],
                    water_level: float = 0.0, min_views: int = 2) -> EvalMask:
    emerged = reference.elevation > water_level
    counts = np.zeros((reference.rows, reference.cols), dtype=np.int64)
    for view in views:
        counts += visibility_mask(reference, view)
    return EvalMask(emerged=emerged, overlap=counts >= min_views)


def masked_rmse(pred: SceneRaster, ref: SceneRaster, mask: np.ndarray | EvalMask
                ) -> float:
    """Root mean square elevation difference over masked cells."""
    if isinstance(mask, EvalMask):
        mask = mask.combined
    if pred.elevation.shape != ref.elevation.shape:
        raise ValueError("prediction and reference grids do not match")
    if mask.shape != ref.elevation.shape:
        raise ValueError("mask does not match the raster grid")
    if not mask.any():
        raise ValueError("empty evaluation mask")
    diff = pred.elevation[mask] - ref.elevation[mask]
    return float(np.sqrt(np.mean(diff * diff)))


def evaluation_report(pred: SceneRaster, ref: SceneRaster,
                      views: list[ViewGeometry], water_level: float = 0.0,
                      min_views: int = 2) -> dict:
    """Compute the full evaluation: RMSE, mask size, per-view visibility."""
    per_view = [visibility_mask(ref, v) for v in views]
    counts = np.sum(per_view, axis=0)
    mask = EvalMask(emerged=ref.elevation > water_level, overlap=counts >= min_views)
    rmse = masked_rmse(pred, ref, mask)
    return {
        "rmse_m": rmse,
        "masked_cells": int(mask.combined.sum()),
        "total_cells": ref.rows * ref.cols,
        "water_level_m": water_level,
        "min_views": min_views,
        "visible_fraction": [float(v.mean()) for v in per_view],
        "mask": mask,
    }


def write_report(path, report: dict) -> None:
    """Delimited text: one metric per line, per-view fractions expanded."""
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        fh.write(f"rmse_m,{report['rmse_m']:.6f}\n")
        fh.write(f"masked_cells,{report['masked_cells']}\n")
        fh.write(f"total_cells,{report['total_cells']}\n")
        fh.write(f"water_level_m,{report['water_level_m']}\n")
        fh.write(f"min_views,{report['min_views']}\n")
        for i, frac in enumerate(report["visible_fraction"]):
            fh.write(f"visible_fraction_view_{i:02d},{frac:.6f}\n")


def _gray_limits(arr: np.ndarray, vmin=None, vmax=None):
    if vmin is None:
        vmin = float(np.percentile(arr, 1))
    if vmax is None:
        vmax = float(np.percentile(arr, 99))
    if vmax <= vmin:
        vmax = vmin + 1.0
    return vmin, vmax


def export_grayscale(path, arr: np.ndarray, vmin=None, vmax=None) -> tuple[float, float]:
    """8-bit grayscale PNG; values scale linearly from vmin (black) to vmax.

    Limits default to the 1st/99th percentile of the data; the used limits
    are returned so callers can record them.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    vmin, vmax = _gray_limits(np.asarray(arr, dtype=np.float64), vmin, vmax)
    plt.imsave(path, arr, cmap="gray", vmin=vmin, vmax=vmax, origin="lower")
    return vmin, vmax


def log_intensity(img: np.ndarray) -> np.ndarray:
    """log10 intensity with a floor at 1e-6 of the mean (for display only)."""
    img = np.asarray(img, dtype=np.float64)
    floor = 1e-6 * max(float(img.mean()), 1e-300)
    return np.log10(np.maximum(img, floor))


def save_panels(out_dir, ref: SceneRaster, pred: SceneRaster,
                mask: EvalMask | None = None, rmse: float | None = None) -> list[str]:
    """Side-by-side reference/reconstruction figures (DSM and backscatter)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    pairs = [
        ("dsm_panel.png", ref.elevation, pred.elevation, "elevation (m)"),
        ("backscatter_panel.png", ref.backscatter, pred.backscatter, "backscatter"),
    ]
    for name, a, b, label in pairs:
        vmin, vmax = _gray_limits(a)
        fig, axes = plt.subplots(1, 2, figsize=(9, 4), constrained_layout=True)
        for ax, data, title in ((axes[0], a, "reference"),
                                (axes[1], b, "reconstruction")):
            shown = np.array(data)
            if mask is not None:
                shown = np.where(mask.combined, shown, np.nan)
            im = ax.imshow(shown, vmin=vmin, vmax=vmax, origin="lower",
                           cmap="terrain" if "elevation" in label else "gray")
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.colorbar(im, ax=axes, shrink=0.85, label=label)
        if rmse is not None and "elevation" in label:
            fig.suptitle(f"masked RMSE = {rmse:.2f} m")
        path = out / name
        fig.savefig(path, dpi=130)
        plt.close(fig)
        written.append(str(path))
    return written
