"""Differentiable SAR intensity rendering and multi-view surface reconstruction.

The package splits into:

- ``scene``      gridded terrain rasters, file format, synthetic scenes
- ``geometry``   stripmap viewing geometry and surface sampling
- ``renderer``   the differentiable row rasterizer (smooth gates/overlaps)
- ``adjoint``    hand-derived reverse pass and finite-difference checks
- ``field``      hash-encoded neural surface (elevation + backscatter)
- ``training``   speckle likelihood, coarse-to-fine schedule, optimizer
- ``oracle``     independent brute-force simulator, speckle, datasets
- ``evaluate``   DSM extraction, visibility masks, masked RMSE, reports
- ``bench``      performance cases (row-wise vs per-pixel reference)
- ``cli``        the ``sardiff`` command-line front end
"""

from .adjoint import FdReport, RowBatchTape, fd_check, fd_gradient, grad_render_row
from .dataset import DatasetError, SarDataset, load_dataset
from .evaluate import (EvalMask, GridSpec, build_eval_mask, evaluation_report,
                       extract_dsm, masked_rmse, visibility_mask)
from .field import (FieldConfig, HashEncodingConfig, NeuralSurfaceField,
                    load_checkpoint, save_checkpoint, window_weights)
from .geometry import (SampleLine, ViewGeometry, sample_line, slant_range,
                       slope_to_antenna, swath_footprint)
from .oracle import (OracleConfig, add_speckle, make_dataset, make_views,
                     oracle_render, raycast_visibility)
from .renderer import (PatchRow, RenderConfig, cell_contribution, nrcs,
                       render_image, render_row, row_patches, shadow_scan,
                       smooth_max)
from .scene import (SceneRaster, SurfaceProvider, make_synthetic_scene,
                    read_intensity, read_raster, write_intensity, write_raster)
from .training import (AdamOptimizer, ScheduleState, TrainConfig, fit,
                       schedule_step, speckle_nll, train_step, tv_penalty)

__version__ = "0.1.0"

__all__ = [
    "AdamOptimizer", "DatasetError", "EvalMask", "FdReport", "FieldConfig",
    "GridSpec", "HashEncodingConfig", "NeuralSurfaceField", "OracleConfig",
    "PatchRow", "RenderConfig", "RowBatchTape", "SampleLine", "SarDataset",
    "SceneRaster", "ScheduleState", "SurfaceProvider", "TrainConfig",
    "ViewGeometry", "add_speckle", "build_eval_mask", "cell_contribution",
    "evaluation_report", "extract_dsm", "fd_check", "fd_gradient", "fit",
    "grad_render_row", "load_checkpoint", "load_dataset", "make_dataset",
    "make_synthetic_scene", "make_views", "masked_rmse", "nrcs",
    "oracle_render", "raycast_visibility", "read_intensity", "read_raster",
    "render_image", "render_row", "row_patches", "sample_line",
    "save_checkpoint", "schedule_step", "shadow_scan", "slant_range",
    "slope_to_antenna", "smooth_max", "speckle_nll", "swath_footprint",
    "train_step", "tv_penalty", "visibility_mask", "window_weights",
    "write_intensity", "write_raster",
]
