"""Loading and validation of on-disk multi-view datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import ViewGeometry, view_from_dict
from .scene import read_intensity


class DatasetError(ValueError):
    pass


@dataclass
class SarDataset:
    """A loaded dataset: views, observed intensities, and scene metadata."""

    views: list[ViewGeometry]
    images: list[np.ndarray]
    manifest_dir: Path
    ground_truth_path: Path | None
    box_x0: float
    box_y0: float
    box_side: float
    ground_cell: float

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def n_range(self) -> int:
        return self.views[0].n_range

    def row_count(self) -> int:
        return sum(v.n_azimuth for v in self.views)


def load_dataset(manifest_path, use_clean: bool = False) -> SarDataset:
    """Read a manifest and its intensity rasters, validating trainability.

    All views must share range dimensions, every image must match its
    declared shape, and observed intensities must be strictly positive
    (the speckle likelihood is undefined at zero).
    """
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != "sardiff-dataset":
        raise DatasetError(f"{manifest_path}: not a dataset manifest")
    base = manifest_path.parent
    entries = manifest.get("views", [])
    if not entries:
        raise DatasetError(f"{manifest_path}: manifest lists no views")

    views, images = [], []
    key = "intensity_clean" if use_clean else "intensity"
    for i, entry in enumerate(entries):
        view = view_from_dict(entry)
        img = read_intensity(base / entry[key])
        if img.shape != (view.n_azimuth, view.n_range):
            raise DatasetError(
                f"view {i}: image shape {img.shape} does not match geometry "
                f"({view.n_azimuth}, {view.n_range})")
        if np.any(img <= 0):
            raise DatasetError(
                f"view {i}: {int(np.sum(img <= 0))} non-positive intensity "
                "pixels; the speckle likelihood needs strictly positive data")
        views.append(view)
        images.append(img)
    n_range = views[0].n_range
    if any(v.n_range != n_range for v in views):
        raise DatasetError("all views must share the same range dimension")

    gt = manifest.get("ground_truth")
    box = manifest.get("box", {})
    ground_cell = float(manifest.get("ground_cell_m", 0.0))
    if ground_cell <= 0:
        from .geometry import swath_footprint

        x_near, x_far = swath_footprint(views[0])
        ground_cell = (x_far - x_near) / views[0].n_range
    return SarDataset(
        views=views,
        images=images,
        manifest_dir=base,
        ground_truth_path=(base / gt) if gt else None,
        box_x0=float(box.get("x0", 0.0)),
        box_y0=float(box.get("y0", 0.0)),
        box_side=float(max(box.get("side_x", 0.0), box.get("side_y", 0.0))),
        ground_cell=ground_cell,
    )
