"""Differentiable forward model: surface sample lines to speckle-free intensity rows.

A row is rendered from K+1 ordered samples P_k in its zero-doppler plane.
Joining consecutive samples gives K segments; stretched by the azimuth
spacing they become rectangular patches. Each patch deposits energy

    I_m += azimuth_spacing * sigma0_k * visibility_k * w_{m,k} * length_k

into every range cell m its slant interval overlaps. Shadowing is a
sequential scan over samples by increasing ground range that tracks the
running line-of-sight horizon; a logistic gate of steepness ``steepness``
(a unit step in hard mode) makes it differentiable. Cell overlap uses a
smooth maximum of accuracy ``smoothing`` so that contributions, and hence
the whole row, stay differentiable in every sample elevation and
backscatter value.

Everything here is pure: rows and views can be rendered concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import SampleLine, ViewGeometry, swath_footprint


@dataclass(frozen=True)
class RenderConfig:
    """Rasterizer knobs; ``None`` fields resolve from the view geometry.

    smoothing   smooth-max accuracy in meters (default slant_cell / 4)
    steepness   shadow sigmoid steepness in inverse-slope units
                (default 10 * x_far / slant_cell: the transition spans about
                a tenth of the slope change of one far-range cell)
    samples     segments per line (default 8 * n_range)
    margin      near-side sampling margin in meters (default 20% of swath)
    hard        replace sigmoid/smooth-max by exact step/max (oracle use;
                not differentiable)
    eps_segment meters below which a segment counts as degenerate and its
                cell weight falls back to midpoint membership
    """

    smoothing: float | None = None
    steepness: float | None = None
    samples: int | None = None
    margin: float | None = None
    hard: bool = False
    eps_segment: float = 1e-6

    def resolve(self, view: ViewGeometry) -> "RenderConfig":
        x_near, x_far = swath_footprint(view)
        smoothing = self.smoothing if self.smoothing is not None else view.slant_cell / 4.0
        steepness = (self.steepness if self.steepness is not None
                     else 10.0 * x_far / view.slant_cell)
        samples = self.samples if self.samples is not None else 8 * view.n_range
        margin = self.margin if self.margin is not None else 0.2 * (x_far - x_near)
        if not self.hard and (smoothing <= 0 or steepness <= 0):
            raise ValueError("smoothing and steepness must be positive outside hard mode")
        return replace(self, smoothing=smoothing, steepness=steepness,
                       samples=samples, margin=margin)


@dataclass
class PatchRow:
    """Per-patch quantities of one rendered row (testing/inspection surface)."""

    length: np.ndarray        # (K,) segment lengths, meters
    visibility: np.ndarray    # (K,) smooth shadow gate in [0, 1]
    d_lo: np.ndarray          # (K,) slant range of the near extremity
    d_hi: np.ndarray          # (K,) slant range of the far extremity
    sigma0: np.ndarray        # (K,) normalized radar cross-section
    weights: np.ndarray       # (K, n_range) cell contribution fractions
    degenerate: np.ndarray    # (K,) bool, cell weight fell back to midpoint rule


def smooth_max(a, b, accuracy):
    """Smooth maximum: exact max at accuracy 0, symmetric, within accuracy/2 of max."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t = a - b
    if np.isscalar(accuracy) and accuracy == 0:
        return np.maximum(a, b)
    s = np.sqrt(t * t + accuracy * accuracy)
    # t^2/s -> |t| as accuracy -> 0; guard the 0/0 at t == 0, s == 0.
    frac = np.divide(t * t, s, out=np.zeros_like(s), where=s > 0)
    return 0.5 * (a + b + frac)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def shadow_scan(eta: np.ndarray, steepness: float, hard: bool = False):
    """Sequential visibility scan along sample slopes ordered by ground range.

    ``eta`` is (..., K+1). Maintains the running horizon slope h and gate v:
    a sample is lit when its line-of-sight slope rises above the horizon of
    the last lit sample; the horizon then blends toward the new slope by the
    gate value. Starts fully lit with the horizon at the first sample, so
    flat and rising terrain stay unshadowed. Patch k inherits the gate of
    its far extremity.

    Returns (visibility (..., K), gate v (..., K+1), horizon h (..., K+1),
    gate_arg (..., K)); the extra arrays feed the reverse pass.
    """
    eta = np.asarray(eta, dtype=np.float64)
    n = eta.shape[-1]
    v = np.empty_like(eta)
    h = np.empty_like(eta)
    arg = np.empty(eta.shape[:-1] + (n - 1,))
    v[..., 0] = 1.0
    h[..., 0] = eta[..., 0]
    for k in range(n - 1):
        a = eta[..., k + 1] - h[..., k]
        arg[..., k] = a
        if hard:
            vk = (a >= 0).astype(np.float64)
        else:
            vk = _sigmoid(steepness * a)
        v[..., k + 1] = vk
        h[..., k + 1] = eta[..., k + 1] * vk + h[..., k] * (1.0 - vk)
    return v[..., 1:], v, h, arg


def cell_contribution(d_lo, d_hi, r_lo, r_hi, accuracy, eps_segment=1e-6):
    """Fraction of a slant segment [d_lo, d_hi] falling inside cell [r_lo, r_hi].

    Smooth inclusion-exclusion over four smooth-max terms, normalized by the
    signed segment extent so fold-over (layover) segments given in either
    order deposit positive weight. At accuracy 0 this is exactly
    len([d_lo, d_hi] ^ [r_lo, r_hi]) / |d_hi - d_lo|. The smoothing leaves
    shallow negative lobes just outside the segment interval; those are
    truncated to zero so contributions honor their [0, 1] bounds and summed
    cell intensities stay non-negative. Segments shorter than
    ``eps_segment`` fall back to midpoint membership (flagged, not an
    error).

    Returns (weight, degenerate_mask).
    """
    d_lo = np.asarray(d_lo, dtype=np.float64)
    d_hi = np.asarray(d_hi, dtype=np.float64)
    dd = d_hi - d_lo
    deg = np.abs(dd) < eps_segment
    num = (smooth_max(d_lo, r_hi, accuracy) + smooth_max(d_hi, r_lo, accuracy)
           - smooth_max(d_hi, r_hi, accuracy) - smooth_max(d_lo, r_lo, accuracy))
    safe_dd = np.where(deg, 1.0, dd)
    w = np.maximum(num / safe_dd, 0.0)
    mid = 0.5 * (d_lo + d_hi)
    w_deg = ((mid >= r_lo) & (mid < r_hi)).astype(np.float64)
    return np.where(deg, w_deg, w), deg


def nrcs(p_near, p_far, backscatter_mid, antenna):
    """Cross-section of the patch spanning two in-plane (ground range, z) points.

    Lambertian: midpoint backscatter times |u.n|, u the unit line of sight
    from the antenna to the segment midpoint, n the upward unit normal of
    the segment swept along azimuth.
    """
    p_near = np.asarray(p_near, dtype=np.float64)
    p_far = np.asarray(p_far, dtype=np.float64)
    o = np.asarray(antenna, dtype=np.float64)
    dxz = p_far - p_near
    length = np.hypot(dxz[..., 0], dxz[..., 1])
    if np.any(length == 0):
        raise ValueError("zero-length segment has no normal")
    mid = 0.5 * (p_near + p_far)
    rel = mid - o
    dist = np.hypot(rel[..., 0], rel[..., 1])
    # u.n with n = (-dz, dx)/l and u = rel/dist.
    cos_inc = np.abs(-rel[..., 0] * dxz[..., 1] + rel[..., 1] * dxz[..., 0]) / (length * dist)
    return np.asarray(backscatter_mid) * cos_inc


def _forward_rows(x, z, b, altitude, r_near, cell, az_spacing, n_range, cfg: RenderConfig,
                  want_cache: bool = False, want_patches: bool = False):
    """Render a batch of rows at once.

    x, z, b are (R, K+1) sample arrays; altitude, r_near, cell, az_spacing
    are (R,) per-row geometry. Returns (intensity (R, n_range), cache|None,
    dense_weights|None). The cache holds every intermediate the reverse
    pass needs (see adjoint.py).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    n_rows, n_pts = x.shape
    altitude = np.broadcast_to(np.asarray(altitude, dtype=np.float64), (n_rows,))
    r_near = np.broadcast_to(np.asarray(r_near, dtype=np.float64), (n_rows,))
    cell = np.broadcast_to(np.asarray(cell, dtype=np.float64), (n_rows,))
    az_spacing = np.broadcast_to(np.asarray(az_spacing, dtype=np.float64), (n_rows,))

    alt = altitude[:, None]
    eta = (z - alt) / x
    d = np.sqrt(x * x + (z - alt) ** 2)

    dx_ = np.diff(x, axis=1)
    dz_ = np.diff(z, axis=1)
    length = np.hypot(dx_, dz_)
    xm = 0.5 * (x[:, :-1] + x[:, 1:])
    zm = 0.5 * (z[:, :-1] + z[:, 1:])
    bm = 0.5 * (b[:, :-1] + b[:, 1:])
    rm = np.sqrt(xm * xm + (zm - alt) ** 2)
    # q/(rm*l) is |u.n|; sigma0*length collapses to bm*|q|/rm, which is what
    # actually enters the row sum.
    q = -xm * dz_ + (zm - alt) * dx_
    amp = bm * np.abs(q) / rm

    vhat, v, h, arg = shadow_scan(eta, cfg.steepness, cfg.hard)

    d_lo = d[:, :-1]
    d_hi = d[:, 1:]
    dd = d_hi - d_lo
    deg = np.abs(dd) < cfg.eps_segment
    mid = 0.5 * (d_lo + d_hi)
    pad = 0.0 if cfg.hard else 3.0 * cfg.smoothing
    seg_lo = np.minimum(d_lo, d_hi) - pad
    seg_hi = np.maximum(d_lo, d_hi) + pad
    seg_lo = np.where(deg, mid, seg_lo)
    seg_hi = np.where(deg, mid, seg_hi)
    cell_col = cell[:, None]
    near_col = r_near[:, None]
    m_first = np.floor((seg_lo - near_col) / cell_col).astype(np.int64)
    m_last = np.floor((seg_hi - near_col) / cell_col).astype(np.int64)
    m_start = np.maximum(m_first, 0)
    m_end = np.minimum(m_last, n_range - 1)
    n_cells = np.maximum(m_end - m_start + 1, 0)
    span = int(n_cells.max(initial=0))

    gate = az_spacing[:, None] * amp * vhat
    intensity = np.zeros(n_rows * n_range)
    row_base = np.arange(n_rows)[:, None] * n_range
    dense = np.zeros((n_rows, n_pts - 1, n_range)) if want_patches else None
    safe_dd = np.where(deg, 1.0, dd)
    for off in range(span):
        m = m_start + off
        valid = off < n_cells
        r_lo = near_col + m * cell_col
        r_hi = r_lo + cell_col
        if cfg.hard:
            num = (np.maximum(d_lo, r_hi) + np.maximum(d_hi, r_lo)
                   - np.maximum(d_hi, r_hi) - np.maximum(d_lo, r_lo))
        else:
            num = (smooth_max(d_lo, r_hi, cfg.smoothing)
                   + smooth_max(d_hi, r_lo, cfg.smoothing)
                   - smooth_max(d_hi, r_hi, cfg.smoothing)
                   - smooth_max(d_lo, r_lo, cfg.smoothing))
        w = np.maximum(num / safe_dd, 0.0)
        if np.any(deg):
            w_deg = ((mid >= r_lo) & (mid < r_hi)).astype(np.float64)
            w = np.where(deg, w_deg, w)
        contrib = gate * w
        idx = (row_base + m)[valid]
        intensity += np.bincount(idx, weights=contrib[valid], minlength=intensity.size)
        if want_patches:
            rows_i, k_i = np.nonzero(valid)
            dense[rows_i, k_i, m[valid]] = w[valid]
    intensity = intensity.reshape(n_rows, n_range)

    cache = None
    if want_cache:
        cache = {
            "x": x, "z": z, "b": b, "altitude": altitude, "r_near": r_near,
            "cell": cell, "az_spacing": az_spacing, "n_range": n_range,
            "eta": eta, "d": d, "dx_": dx_, "dz_": dz_, "length": length,
            "xm": xm, "zm": zm, "bm": bm, "rm": rm, "q": q, "amp": amp,
            "vhat": vhat, "v": v, "h": h, "arg": arg,
            "deg": deg, "dd": dd, "safe_dd": safe_dd, "mid": mid,
            "m_start": m_start, "n_cells": n_cells, "span": span,
            "cfg": cfg,
        }
    return intensity, cache, dense


def _line_geometry_ok(line: SampleLine, view: ViewGeometry) -> None:
    x_near, x_far = swath_footprint(view)
    s = line.spacing
    if line.ground_range[0] > x_near + s or line.ground_range[-1] < x_far - s:
        raise ValueError("sample line does not cover the swath footprint")


def render_row(line: SampleLine, view: ViewGeometry, cfg: RenderConfig | None = None
               ) -> np.ndarray:
    """Speckle-free intensity of one azimuth row, all range cells at once."""
    cfg = (cfg or RenderConfig()).resolve(view)
    _line_geometry_ok(line, view)
    intensity, _, _ = _forward_rows(
        line.ground_range, line.elevation, line.backscatter,
        view.altitude, view.near_slant_range, view.slant_cell,
        view.azimuth_spacing, view.n_range, cfg)
    return intensity[0]


def row_patches(line: SampleLine, view: ViewGeometry, cfg: RenderConfig | None = None
                ) -> PatchRow:
    """Expose the per-patch terms of a rendered row (lengths, gates, weights)."""
    cfg = (cfg or RenderConfig()).resolve(view)
    _line_geometry_ok(line, view)
    _, cache, dense = _forward_rows(
        line.ground_range, line.elevation, line.backscatter,
        view.altitude, view.near_slant_range, view.slant_cell,
        view.azimuth_spacing, view.n_range, cfg,
        want_cache=True, want_patches=True)
    length = cache["length"][0]
    sigma0 = cache["amp"][0] / np.maximum(length, 1e-300)
    return PatchRow(
        length=length,
        visibility=cache["vhat"][0],
        d_lo=cache["d"][0, :-1],
        d_hi=cache["d"][0, 1:],
        sigma0=sigma0,
        weights=dense[0],
        degenerate=cache["deg"][0],
    )


def render_image(provider, view: ViewGeometry, cfg: RenderConfig | None = None,
                 row_block: int = 256) -> np.ndarray:
    """Render all azimuth rows of a view into an (n_azimuth, n_range) image.

    Rows are independent; they are batched through the rasterizer in blocks
    purely for memory locality.
    """
    from .geometry import line_positions

    cfg = (cfg or RenderConfig()).resolve(view)
    image = np.empty((view.n_azimuth, view.n_range))
    for start in range(0, view.n_azimuth, row_block):
        rows = range(start, min(start + row_block, view.n_azimuth))
        xs, zs, bs = [], [], []
        for a in rows:
            ground_range, world, spacing = line_positions(
                view, a, cfg.samples, jitter=0.0, margin=cfg.margin)
            elev, back = provider.query(world, spacing=spacing)
            xs.append(ground_range)
            zs.append(elev)
            bs.append(back)
        block, _, _ = _forward_rows(
            np.stack(xs), np.stack(zs), np.stack(bs),
            view.altitude, view.near_slant_range, view.slant_cell,
            view.azimuth_spacing, view.n_range, cfg)
        image[start:start + len(xs)] = block
    return image
