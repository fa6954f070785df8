"""Scene representations: gridded elevation/backscatter rasters and synthetic test scenes.

A scene is a square patch of terrain described by two co-registered grids,
elevation Z(x, y) in meters and a dimensionless backscatter coefficient
B(x, y) >= 0. Anything that can answer point queries for (Z, B) implements
the SurfaceProvider protocol; the raster answers them by bilinear
interpolation, the neural field (see field.py) by network evaluation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

RASTER_MAGIC = b"SARG"
RASTER_VERSION = 1
# Refuse headers whose payload would exceed ~2 GiB per channel.
MAX_CELLS = 256 * 1024 * 1024


class RasterFormatError(ValueError):
    """Base class for raster file problems."""


class MalformedHeaderError(RasterFormatError):
    pass


class TruncatedPayloadError(RasterFormatError):
    pass


class DimensionOverflowError(RasterFormatError):
    pass


@runtime_checkable
class SurfaceProvider(Protocol):
    """Batch point query contract shared by rasters and learned fields.

    Implementations must be deterministic, defined everywhere inside their
    bounding box, and clamp queries outside it to the box edge. ``spacing``
    is an optional per-point sample spacing hint in meters; providers that
    band-limit their output (the neural field) use it, rasters ignore it.
    """

    def query(self, points: np.ndarray, spacing=None) -> tuple[np.ndarray, np.ndarray]:
        ...


@dataclass(frozen=True)
class SceneRaster:
    """Gridded elevation and backscatter over a rectangular footprint.

    Grid node (i, j) sits at world position (x0 + j*dx, y0 + i*dy); both
    channels are (rows, cols) float arrays. Instances are immutable and
    safe for concurrent reads.
    """

    rows: int
    cols: int
    x0: float
    y0: float
    dx: float
    dy: float
    elevation: np.ndarray
    backscatter: np.ndarray

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("raster needs at least a 2x2 grid")
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("grid spacing must be positive")
        elev = np.ascontiguousarray(self.elevation, dtype=np.float64)
        back = np.ascontiguousarray(self.backscatter, dtype=np.float64)
        if elev.shape != (self.rows, self.cols) or back.shape != (self.rows, self.cols):
            raise ValueError("channel shapes must match (rows, cols)")
        if not np.all(np.isfinite(elev)):
            raise ValueError("elevation must be finite")
        if not np.all(back >= 0):
            raise ValueError("backscatter must be non-negative")
        elev.setflags(write=False)
        back.setflags(write=False)
        object.__setattr__(self, "elevation", elev)
        object.__setattr__(self, "backscatter", back)

    @property
    def side_x(self) -> float:
        return (self.cols - 1) * self.dx

    @property
    def side_y(self) -> float:
        return (self.rows - 1) * self.dy

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + 0.5 * self.side_x, self.y0 + 0.5 * self.side_y)

    def query(self, points: np.ndarray, spacing=None) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear (Z, B) at world points (N, 2); outside the grid, edge-clamped."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[None, :]
        # Fractional grid coordinates, clamped to the covered rectangle.
        gx = np.clip((pts[:, 0] - self.x0) / self.dx, 0.0, self.cols - 1.0)
        gy = np.clip((pts[:, 1] - self.y0) / self.dy, 0.0, self.rows - 1.0)
        j0 = np.minimum(gx.astype(np.int64), self.cols - 2)
        i0 = np.minimum(gy.astype(np.int64), self.rows - 2)
        fx = gx - j0
        fy = gy - i0
        w00 = (1 - fx) * (1 - fy)
        w10 = fx * (1 - fy)
        w01 = (1 - fx) * fy
        w11 = fx * fy

        def blend(grid):
            return (w00 * grid[i0, j0] + w10 * grid[i0, j0 + 1]
                    + w01 * grid[i0 + 1, j0] + w11 * grid[i0 + 1, j0 + 1])

        return blend(self.elevation), blend(self.backscatter)


def write_raster(path, raster: SceneRaster) -> None:
    """Write the two-channel binary raster format (elevation then backscatter)."""
    _write_channels(path, raster.rows, raster.cols, raster.x0, raster.y0,
                    raster.dx, raster.dy,
                    [raster.elevation, raster.backscatter])


def read_raster(path) -> SceneRaster:
    rows, cols, x0, y0, dx, dy, channels = _read_channels(path, 2)
    return SceneRaster(rows, cols, x0, y0, dx, dy, channels[0], channels[1])


def write_intensity(path, intensity: np.ndarray, x0=0.0, y0=0.0, dx=1.0, dy=1.0) -> None:
    """Single-channel variant of the raster container, used for SAR images.

    Rows are azimuth lines, columns range cells; the geo fields carry the
    per-row / per-cell spacings for bookkeeping only.
    """
    arr = np.asarray(intensity, dtype=np.float64)
    _write_channels(path, arr.shape[0], arr.shape[1], x0, y0, dx, dy, [arr])


def read_intensity(path) -> np.ndarray:
    _, _, _, _, _, _, channels = _read_channels(path, 1)
    return channels[0]


def _write_channels(path, rows, cols, x0, y0, dx, dy, channels) -> None:
    header = RASTER_MAGIC + struct.pack("<BII", RASTER_VERSION, rows, cols)
    header += struct.pack("<dddd", x0, y0, dx, dy)
    with open(path, "wb") as fh:
        fh.write(header)
        for chan in channels:
            fh.write(np.ascontiguousarray(chan, dtype="<f4").tobytes())


def _read_channels(path, n_channels):
    with open(path, "rb") as fh:
        blob = fh.read()
    head_len = 4 + 1 + 8 + 32
    if len(blob) < head_len or blob[:4] != RASTER_MAGIC:
        raise MalformedHeaderError(f"{path}: not a raster file (bad magic)")
    version, rows, cols = struct.unpack_from("<BII", blob, 4)
    if version != RASTER_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported raster version {version}")
    if rows < 1 or cols < 1 or rows * cols > MAX_CELLS:
        raise DimensionOverflowError(f"{path}: implausible dimensions {rows}x{cols}")
    x0, y0, dx, dy = struct.unpack_from("<dddd", blob, 13)
    expected = head_len + 4 * rows * cols * n_channels
    if len(blob) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(blob) - head_len} bytes, "
            f"expected {expected - head_len}")
    if len(blob) > expected:
        raise TruncatedPayloadError(f"{path}: trailing bytes after payload")
    channels = []
    off = head_len
    for _ in range(n_channels):
        flat = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=off)
        channels.append(flat.reshape(rows, cols).astype(np.float64))
        off += 4 * rows * cols
    return rows, cols, x0, y0, dx, dy, channels


SCENE_KINDS = ("flat_ramp", "gaussian_hills", "wall", "island_two_materials")


def make_synthetic_scene(kind: str, seed: int, rows: int, cols: int, size: float,
                         **params) -> SceneRaster:
    """Deterministic test terrain over a square box of side ``size`` meters.

    Kinds:
      flat_ramp            plane tilted along +x; ``ramp_slope`` (default 0.02)
      gaussian_hills       seeded sum of 3..10 smooth bumps, uniform backscatter
      wall                 vertical step of ``wall_height`` at ``wall_x`` fraction
      island_two_materials land above water (Z < 0), dim water and two land
                           backscatter levels
    """
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    rng = np.random.default_rng(seed)
    dx = size / (cols - 1)
    dy = size / (rows - 1)
    x = np.arange(cols) * dx
    y = np.arange(rows) * dy
    xx, yy = np.meshgrid(x, y)
    back = np.ones((rows, cols))

    if kind == "flat_ramp":
        slope = params.get("ramp_slope", 0.02)
        elev = slope * (xx - 0.5 * size)
    elif kind == "wall":
        height = params.get("wall_height", 30.0)
        wall_x = params.get("wall_x", 0.5) * size
        elev = np.where(xx >= wall_x, height, 0.0)
    elif kind == "gaussian_hills":
        n_bumps = int(rng.integers(3, 11))
        amp_max = params.get("amplitude", 60.0)
        elev = np.zeros((rows, cols))
        for _ in range(n_bumps):
            # Keep bump centers away from the border so the scene edge
            # stays near sea level (the swath extends past the box).
            cx = rng.uniform(0.25, 0.75) * size
            cy = rng.uniform(0.25, 0.75) * size
            sig = rng.uniform(0.06, 0.16) * size
            amp = rng.uniform(0.35, 1.0) * amp_max
            elev += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig ** 2))
    else:  # island_two_materials
        amp = params.get("amplitude", 60.0)
        depth = params.get("water_depth", 8.0)
        land = np.zeros((rows, cols))
        for _ in range(3):
            cx = rng.uniform(0.35, 0.65) * size
            cy = rng.uniform(0.35, 0.65) * size
            sig = rng.uniform(0.12, 0.2) * size
            land += rng.uniform(0.5, 1.0) * np.exp(
                -((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig ** 2))
        land = land / land.max()
        elev = land * (amp + depth) - depth
        water = elev < 0.0
        # Two land materials split by a smooth seeded boundary curve.
        split = (yy - 0.5 * size) - 0.15 * size * np.sin(
            2 * np.pi * xx / size + rng.uniform(0, 2 * np.pi))
        back = np.where(split > 0, 1.4, 0.7)
        back = np.where(water, params.get("water_backscatter", 0.02), back)

    return SceneRaster(rows, cols, 0.0, 0.0, dx, dy, elev, back)
