"""Independent reference simulator and dataset generator.

This module is the measuring stick for the differentiable renderer: it
evaluates the same image formation (surface echoes summed per range cell)
by brute force, with dense supersampling, exact ray-cast visibility
against the piecewise-linear terrain profile, and hard interval
intersection for the cell binning. It deliberately shares none of the
renderer's shadow or contribution code, so agreement between the two is
evidence, not tautology.

It also owns speckle synthesis and on-disk dataset generation (per-view
clean and noisy intensity rasters plus a manifest).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import ViewGeometry, line_positions, swath_footprint, view_to_dict
from .scene import SceneRaster, write_intensity, write_raster

MATERIAL_LAWS = ("cosine", "power_cosine")


@dataclass(frozen=True)
class OracleConfig:
    supersampling: int = 32       # dense samples per range cell
    material: str = "cosine"
    material_exponent: float = 2.0  # only used by power_cosine
    looks: int = 1                # speckle looks
    seed: int = 0

    def __post_init__(self):
        if self.supersampling < 4:
            raise ValueError("supersampling must be at least 4")
        if self.material not in MATERIAL_LAWS:
            raise ValueError(f"material must be one of {MATERIAL_LAWS}")
        if self.looks < 1:
            raise ValueError("looks must be at least 1")


def raycast_visibility(ground_range: np.ndarray, elevation: np.ndarray,
                       altitude: float | np.ndarray):
    """Exact terrain self-occlusion along ordered profile vertices.

    For a piecewise-linear profile, the sight line from the antenna to any
    vertex clears the terrain iff the vertex's line-of-sight slope reaches
    the running maximum slope over all earlier vertices (extrema of the
    slope along a linear segment sit at its endpoints, so vertex slopes
    decide exactly). Returns (lit mask per vertex, running horizon slope).
    Accepts (..., n) batches; the first vertex is always lit.
    """
    x = np.asarray(ground_range, dtype=np.float64)
    z = np.asarray(elevation, dtype=np.float64)
    alt = np.asarray(altitude, dtype=np.float64)
    slope = (z - alt[..., None]) / x
    horizon = np.maximum.accumulate(slope, axis=-1)
    lit = np.ones(slope.shape, dtype=bool)
    lit[..., 1:] = slope[..., 1:] >= horizon[..., :-1]
    return lit, horizon


def _material_sigma0(cfg: OracleConfig, backscatter, cos_incidence):
    if cfg.material == "cosine":
        return backscatter * cos_incidence
    return backscatter * cos_incidence ** cfg.material_exponent


def oracle_render(raster: SceneRaster, view: ViewGeometry,
                  cfg: OracleConfig | None = None,
                  row_block: int = 64) -> np.ndarray:
    """Dense-quadrature, hard-indicator render of a view (speckle free).

    Each row is sampled at supersampling * n_range points across the
    footprint plus the standard near margin; segment echoes go to every
    cell their slant interval intersects, weighted by the exact overlap
    fraction. Raises if the view mostly images terrain outside the raster
    (the clamped border is only meant for margins).
    """
    cfg = cfg or OracleConfig()
    n_dense = cfg.supersampling * view.n_range
    image = np.empty((view.n_azimuth, view.n_range))
    inside = 0
    total = 0
    for start in range(0, view.n_azimuth, row_block):
        rows = range(start, min(start + row_block, view.n_azimuth))
        xs, worlds = [], []
        for a in rows:
            ground_range, world, _ = line_positions(view, a, n_dense, jitter=0.0)
            xs.append(ground_range)
            worlds.append(world)
        x = np.stack(xs)
        world = np.stack(worlds)
        flat = world.reshape(-1, 2)
        inside += int(np.sum(
            (flat[:, 0] >= raster.x0) & (flat[:, 0] <= raster.x0 + raster.side_x)
            & (flat[:, 1] >= raster.y0) & (flat[:, 1] <= raster.y0 + raster.side_y)))
        total += flat.shape[0]
        z, b = raster.query(flat)
        z = z.reshape(x.shape)
        b = b.reshape(x.shape)
        image[start:start + len(xs)] = _oracle_rows(x, z, b, view, cfg)
    if inside < total // 2:
        raise ValueError("footprint not covered: view images mostly outside the raster")
    return image


def _oracle_rows(x, z, b, view: ViewGeometry, cfg: OracleConfig) -> np.ndarray:
    alt = view.altitude
    n_range = view.n_range
    d = np.sqrt(x * x + (z - alt) ** 2)
    lit, horizon = raycast_visibility(x, z, alt)

    dx_ = np.diff(x, axis=-1)
    dz_ = np.diff(z, axis=-1)
    xm = 0.5 * (x[:, :-1] + x[:, 1:])
    zm = 0.5 * (z[:, :-1] + z[:, 1:])
    bm = 0.5 * (b[:, :-1] + b[:, 1:])
    length = np.hypot(dx_, dz_)
    rm = np.sqrt(xm * xm + (zm - alt) ** 2)
    cos_inc = np.abs(-xm * dz_ + (zm - alt) * dx_) / (length * rm)
    sigma0 = _material_sigma0(cfg, bm, cos_inc)

    # Midpoint visibility: the horizon over vertices up to the segment's
    # near end decides whether the midpoint's sight line is clear.
    slope_mid = (zm - alt) / xm
    vis = (slope_mid >= horizon[:, :-1]).astype(np.float64)

    d_lo = np.minimum(d[:, :-1], d[:, 1:])
    d_hi = np.maximum(d[:, :-1], d[:, 1:])
    extent = d_hi - d_lo
    deg = extent < 1e-9
    r_near = view.near_slant_range
    cell = view.slant_cell
    mid = 0.5 * (d_lo + d_hi)
    m_first = np.floor((np.where(deg, mid, d_lo) - r_near) / cell).astype(np.int64)
    m_last = np.floor((np.where(deg, mid, d_hi) - r_near) / cell).astype(np.int64)
    m_start = np.maximum(m_first, 0)
    m_end = np.minimum(m_last, n_range - 1)
    n_cells = np.maximum(m_end - m_start + 1, 0)

    n_rows = x.shape[0]
    out = np.zeros(n_rows * n_range)
    row_base = np.arange(n_rows)[:, None] * n_range
    energy = view.azimuth_spacing * sigma0 * vis * length
    safe_extent = np.where(deg, 1.0, extent)
    for off in range(int(n_cells.max(initial=0))):
        m = m_start + off
        valid = off < n_cells
        r_lo = r_near + m * cell
        r_hi = r_lo + cell
        overlap = np.clip(np.minimum(d_hi, r_hi) - np.maximum(d_lo, r_lo), 0.0, None)
        w = np.where(deg, ((mid >= r_lo) & (mid < r_hi)).astype(np.float64),
                     overlap / safe_extent)
        contrib = energy * w
        idx = (row_base + m)[valid]
        out += np.bincount(idx, weights=contrib[valid], minlength=out.size)
    return out.reshape(n_rows, n_range)


def add_speckle(intensity: np.ndarray, looks: int = 1, seed: int = 0) -> np.ndarray:
    """Multiplicative speckle: unit-mean gamma of shape ``looks`` per pixel.

    One look gives the exponential intensity statistics of fully developed
    speckle; zero input pixels stay zero.
    """
    if looks < 1:
        raise ValueError("looks must be at least 1")
    img = np.asarray(intensity, dtype=np.float64)
    if np.any(img < 0):
        raise ValueError("intensities must be non-negative")
    rng = np.random.default_rng(seed)
    factor = rng.gamma(shape=float(looks), scale=1.0 / looks, size=img.shape)
    return img * factor


def make_views(center_x: float, center_y: float, box_side: float, n_views: int,
               incidence_deg: float = 45.0, n_range: int = 96, n_azimuth: int = 96,
               altitude_factor: float = 3.0, swath_factor: float = 1.05,
               heading_offset: float = 0.0, look_side: str = "right"
               ) -> list[ViewGeometry]:
    """Evenly-headed stripmap views centered on a scene.

    Headings are heading_offset + 2*pi*i/n_views; each swath is
    swath_factor * box_side wide on the ground at the requested incidence
    and the track span matches, so every view images the scene center.
    """
    if n_views < 1:
        raise ValueError("need at least one view")
    altitude = altitude_factor * box_side
    x_center = altitude * np.tan(np.radians(incidence_deg))
    width = swath_factor * box_side
    x_near = x_center - 0.5 * width
    if x_near <= 0:
        raise ValueError("incidence too steep for the requested swath width")
    r_near = float(np.hypot(x_near, altitude))
    r_far = float(np.hypot(x_near + width, altitude))
    slant_cell = (r_far - r_near) / n_range
    az_spacing = swath_factor * box_side / n_azimuth
    views = []
    for i in range(n_views):
        heading = heading_offset + 2.0 * np.pi * i / n_views
        flight = np.array([-np.sin(heading), np.cos(heading)])
        ground = np.array([np.cos(heading), np.sin(heading)])
        if look_side == "left":
            ground = -ground
        ref = (np.array([center_x, center_y]) - x_center * ground
               - 0.5 * (n_azimuth - 1) * az_spacing * flight)
        views.append(ViewGeometry(
            heading=heading, look_side=look_side, altitude=altitude,
            near_slant_range=r_near, slant_cell=slant_cell,
            azimuth_spacing=az_spacing, n_azimuth=n_azimuth, n_range=n_range,
            ref_x=float(ref[0]), ref_y=float(ref[1])))
    return views


def mean_ground_cell(view: ViewGeometry) -> float:
    """Average ground footprint of one range cell across the swath."""
    x_near, x_far = swath_footprint(view)
    return (x_far - x_near) / view.n_range


MANIFEST_NAME = "manifest.json"


def make_dataset(raster: SceneRaster, views: list[ViewGeometry],
                 cfg: OracleConfig, out_dir) -> Path:
    """Render, speckle and write a multi-view dataset; returns the manifest path.

    Writes the ground-truth raster, one clean and one speckled intensity
    raster per view, and a manifest naming all files and acquisition
    parameters. Fully reproducible: the same raster, views and config give
    byte-identical outputs.
    """
    if not views:
        raise ValueError("dataset needs at least one view")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_raster(out / "ground_truth.sarg", raster)
    seed_seq = np.random.SeedSequence(cfg.seed)
    view_seeds = [int(s.generate_state(1)[0]) for s in seed_seq.spawn(len(views))]
    entries = []
    for i, view in enumerate(views):
        clean = oracle_render(raster, view, cfg)
        noisy = add_speckle(clean, cfg.looks, view_seeds[i])
        clean_name = f"view_{i:02d}_clean.sarg"
        noisy_name = f"view_{i:02d}_speckled.sarg"
        write_intensity(out / clean_name, clean,
                        dx=view.slant_cell, dy=view.azimuth_spacing)
        write_intensity(out / noisy_name, noisy,
                        dx=view.slant_cell, dy=view.azimuth_spacing)
        entry = view_to_dict(view)
        entry["intensity"] = noisy_name
        entry["intensity_clean"] = clean_name
        entry["speckle_seed"] = view_seeds[i]
        entries.append(entry)
    manifest = {
        "format": "sardiff-dataset",
        "version": 1,
        "ground_truth": "ground_truth.sarg",
        "box": {"x0": raster.x0, "y0": raster.y0,
                "side_x": raster.side_x, "side_y": raster.side_y},
        "oracle": {"supersampling": cfg.supersampling, "material": cfg.material,
                   "material_exponent": cfg.material_exponent,
                   "looks": cfg.looks, "seed": cfg.seed},
        "ground_cell_m": mean_ground_cell(views[0]),
        "views": entries,
    }
    path = out / MANIFEST_NAME
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
