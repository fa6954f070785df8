import numpy as np
import pytest

from sardiff.geometry import ViewGeometry


def build_view(n_range=64, n_azimuth=4, altitude=3000.0, x_center=3000.0,
               width=2800.0, heading=0.0, az_spacing=10.0, ref=(0.0, 0.0)):
    """A simple right-looking view whose swath is centered at x_center."""
    x_near = x_center - 0.5 * width
    x_far = x_center + 0.5 * width
    r_near = float(np.hypot(x_near, altitude))
    r_far = float(np.hypot(x_far, altitude))
    return ViewGeometry(
        heading=heading, look_side="right", altitude=altitude,
        near_slant_range=r_near, slant_cell=(r_far - r_near) / n_range,
        azimuth_spacing=az_spacing, n_azimuth=n_azimuth, n_range=n_range,
        ref_x=ref[0], ref_y=ref[1])


def flat_earth_intensity(view, backscatter=1.0):
    """Exact per-cell intensity of a flat z=0 unit scene.

    The patch sum converges to az_spacing * B * integral of H/r dX over the
    cell's ground footprint, and that integral has the closed form
    H * asinh(X/H).
    """
    h = view.altitude
    m = np.arange(view.n_range)
    r_lo = view.near_slant_range + m * view.slant_cell
    r_hi = r_lo + view.slant_cell
    x_lo = np.sqrt(np.maximum(r_lo ** 2 - h ** 2, 0.0))
    x_hi = np.sqrt(np.maximum(r_hi ** 2 - h ** 2, 0.0))
    return view.azimuth_spacing * backscatter * h * (
        np.arcsinh(x_hi / h) - np.arcsinh(x_lo / h))


@pytest.fixture
def flat_view():
    return build_view()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
