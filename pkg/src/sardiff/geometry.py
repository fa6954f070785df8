"""Stripmap acquisition geometry.

Conventions: a local planar frame with z up; the sensor flies a straight,
level line at altitude H. ``heading`` rotates the flight direction about
the vertical, with heading 0 flying along +y and a right-looking antenna
facing +x. Each azimuth row of the image lives in the zero-doppler plane
through the sensor, perpendicular to the flight direction; within that
plane a point is located by its ground-range abscissa X >= 0 (distance
from the ground track) and its elevation z.

Range cell m collects echoes whose slant range falls inside
[r0 + m*dr, r0 + (m+1)*dr].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import SurfaceProvider

# Ground-range samples cannot start at the ground track itself: the
# line-of-sight slope (z - H)/X diverges as X -> 0.
MIN_GROUND_RANGE = 1e-3


@dataclass(frozen=True)
class ViewGeometry:
    """One stripmap acquisition: sensor line, look geometry and image dims."""

    heading: float            # flight-direction rotation about vertical, radians
    look_side: str            # "left" or "right"
    altitude: float           # sensor height H above z = 0, meters
    near_slant_range: float   # slant range of the first cell edge, meters
    slant_cell: float         # slant range cell size, meters
    azimuth_spacing: float    # along-track distance between rows, meters
    n_azimuth: int            # image rows
    n_range: int              # image range cells
    ref_x: float              # world (x, y) of the row-0 antenna ground point
    ref_y: float

    def __post_init__(self):
        if self.look_side not in ("left", "right"):
            raise ValueError("look_side must be 'left' or 'right'")
        if self.altitude <= 0:
            raise ValueError("altitude must be positive")
        if self.slant_cell <= 0 or self.azimuth_spacing <= 0:
            raise ValueError("cell sizes must be positive")
        if self.near_slant_range < self.altitude:
            raise ValueError("near slant range cannot be below the altitude")
        if self.n_azimuth < 1 or self.n_range < 1:
            raise ValueError("image dimensions must be positive")

    @property
    def flight_dir(self) -> np.ndarray:
        return np.array([-np.sin(self.heading), np.cos(self.heading)])

    @property
    def ground_dir(self) -> np.ndarray:
        """Unit vector from the ground track toward increasing ground range."""
        d = np.array([np.cos(self.heading), np.sin(self.heading)])
        return d if self.look_side == "right" else -d

    @property
    def far_slant_range(self) -> float:
        return self.near_slant_range + self.n_range * self.slant_cell

    @property
    def standoff(self) -> float:
        """Ground distance from the flight line to the near-edge projection."""
        return swath_footprint(self)[0]

    def antenna_ground(self, a) -> np.ndarray:
        """World (x, y) under the antenna for azimuth row(s) ``a``."""
        a = np.asarray(a, dtype=np.float64)
        ref = np.array([self.ref_x, self.ref_y])
        return ref + a[..., None] * self.azimuth_spacing * self.flight_dir

    def cell_bounds(self, m) -> tuple[np.ndarray, np.ndarray]:
        m = np.asarray(m, dtype=np.float64)
        lo = self.near_slant_range + m * self.slant_cell
        return lo, lo + self.slant_cell


@dataclass(frozen=True)
class SampleLine:
    """Ordered surface samples along one zero-doppler line.

    ``ground_range`` holds K+1 strictly increasing abscissas; ``world``,
    ``elevation`` and ``backscatter`` are the matching world positions and
    surface values. ``spacing`` is the uniform sample step in meters.
    """

    azimuth: int
    antenna_xy: np.ndarray
    ground_range: np.ndarray
    world: np.ndarray
    elevation: np.ndarray
    backscatter: np.ndarray
    spacing: float

    def __post_init__(self):
        if self.ground_range.size < 3:
            raise ValueError("a sample line needs at least 3 points (K >= 2)")
        if not np.all(np.diff(self.ground_range) > 0):
            raise ValueError("ground-range samples must be strictly increasing")


def swath_footprint(view: ViewGeometry) -> tuple[float, float]:
    """Flat-earth (z = 0) ground-range interval covered by the swath."""
    h2 = view.altitude ** 2
    x_near = np.sqrt(max(view.near_slant_range ** 2 - h2, 0.0))
    x_far = np.sqrt(max(view.far_slant_range ** 2 - h2, 0.0))
    return float(x_near), float(x_far)


def default_margin(view: ViewGeometry) -> float:
    """Near-side sampling margin: 20% of the swath ground width.

    Terrain just before the swath can cast shadows into it (and lay over
    into the near cells), so sampling starts this far before the footprint.
    """
    x_near, x_far = swath_footprint(view)
    return 0.2 * (x_far - x_near)


def line_positions(view: ViewGeometry, a: int, count: int, jitter: float = 0.0,
                   margin: float | None = None):
    """Ground-range abscissas and world positions for one sample line.

    Returns (ground_range (K+1,), world (K+1, 2), spacing). The K+1
    abscissas partition [x_near - margin, x_far] uniformly; ``jitter`` in
    [-0.5, 0.5) shifts the whole line by that fraction of the spacing so
    repeated draws decorrelate sample positions without losing uniformity.
    """
    if count < 2:
        raise ValueError("need at least 2 segments per line")
    if not 0 <= a < view.n_azimuth:
        raise ValueError(f"azimuth row {a} outside [0, {view.n_azimuth})")
    x_near, x_far = swath_footprint(view)
    if margin is None:
        margin = default_margin(view)
    if margin < 0:
        raise ValueError("margin must be non-negative")
    start = max(x_near - margin, MIN_GROUND_RANGE)
    if x_far <= start:
        raise ValueError("degenerate span: far edge does not exceed line start")
    spacing = (x_far - start) / count
    ground_range = start + (np.arange(count + 1) + jitter) * spacing
    ground_range = np.maximum(ground_range, MIN_GROUND_RANGE)
    antenna = view.antenna_ground(a)
    world = antenna[None, :] + ground_range[:, None] * view.ground_dir[None, :]
    return ground_range, world, spacing


def sample_line(view: ViewGeometry, a: int, count: int, jitter: float = 0.0,
                margin: float | None = None, provider: SurfaceProvider | None = None
                ) -> SampleLine:
    """Sample the surface along the zero-doppler line of azimuth row ``a``.

    The provider is queried once for all K+1 points; pure given an explicit
    ``jitter`` value, so lines can be built concurrently.
    """
    ground_range, world, spacing = line_positions(view, a, count, jitter, margin)
    if provider is None:
        raise ValueError("sample_line requires a surface provider")
    elevation, backscatter = provider.query(world, spacing=spacing)
    return SampleLine(
        azimuth=a,
        antenna_xy=view.antenna_ground(a),
        ground_range=ground_range,
        world=world,
        elevation=np.asarray(elevation, dtype=np.float64),
        backscatter=np.asarray(backscatter, dtype=np.float64),
        spacing=spacing,
    )


def slant_range(antenna, point):
    """Euclidean distance between in-plane (ground range, z) points."""
    o = np.asarray(antenna, dtype=np.float64)
    p = np.asarray(point, dtype=np.float64)
    return np.hypot(p[..., 0] - o[..., 0], p[..., 1] - o[..., 1])


def slope_to_antenna(antenna, point):
    """Line-of-sight slope from the antenna to an in-plane point.

    Negative when the point lies below the sensor; undefined on or behind
    the ground track.
    """
    o = np.asarray(antenna, dtype=np.float64)
    p = np.asarray(point, dtype=np.float64)
    run = p[..., 0] - o[..., 0]
    if np.any(run <= 0):
        raise ValueError("point must lie strictly down-range of the antenna")
    return (p[..., 1] - o[..., 1]) / run


def view_to_dict(view: ViewGeometry) -> dict:
    return {
        "heading_rad": view.heading,
        "look_side": view.look_side,
        "altitude_m": view.altitude,
        "near_slant_range_m": view.near_slant_range,
        "slant_cell_m": view.slant_cell,
        "azimuth_spacing_m": view.azimuth_spacing,
        "n_azimuth": view.n_azimuth,
        "n_range": view.n_range,
        "ref_x_m": view.ref_x,
        "ref_y_m": view.ref_y,
    }


def view_from_dict(d: dict) -> ViewGeometry:
    return ViewGeometry(
        heading=float(d["heading_rad"]),
        look_side=str(d["look_side"]),
        altitude=float(d["altitude_m"]),
        near_slant_range=float(d["near_slant_range_m"]),
        slant_cell=float(d["slant_cell_m"]),
        azimuth_spacing=float(d["azimuth_spacing_m"]),
        n_azimuth=int(d["n_azimuth"]),
        n_range=int(d["n_range"]),
        ref_x=float(d["ref_x_m"]),
        ref_y=float(d["ref_y_m"]),
    )
