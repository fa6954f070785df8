"""Hand-derived reverse pass of the rasterizer, plus a finite-difference harness.

The renderer's forward pass is a short chain of elementwise maps (slopes,
slant ranges, cross-sections), one sequential gate recursion, and a sparse
scatter of patch weights into range cells. Its adjoint is written out
explicitly here rather than taped: each forward intermediate has a closed
form derivative, and the gate recursion back-propagates as a reverse scan
in O(K).

A tape records one minibatch of rows; repeated backward calls over an
unchanged tape return identical arrays, and gradients are linear in the
upstream cell adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SampleLine, ViewGeometry
from .renderer import RenderConfig, _forward_rows, smooth_max


def _dmax_dfirst(t, accuracy):
    """d smooth_max(a, b)/da as a function of t = a - b."""
    s2 = t * t + accuracy * accuracy
    s = np.sqrt(s2)
    phi = np.divide(t * (t * t + 2.0 * accuracy * accuracy), s2 * s,
                    out=np.sign(t), where=s > 0)
    return 0.5 * (1.0 + phi)


class RowBatchTape:
    """Forward-renders a batch of rows and answers adjoint queries.

    Inputs are (R, K+1) sample arrays plus per-row geometry scalars. After
    construction, ``intensity`` holds the rendered rows and ``backward``
    maps upstream cell adjoints (R, n_range) to per-sample elevation and
    backscatter adjoints (R, K+1). One tape per minibatch; tapes are
    independent of each other.
    """

    def __init__(self, x, z, b, altitude, r_near, cell, az_spacing, n_range,
                 cfg: RenderConfig):
        if cfg.hard:
            raise ValueError("gradients require the smooth renderer")
        if cfg.smoothing is None or cfg.steepness is None:
            raise ValueError("config must be resolved before taping")
        self.cfg = cfg
        self.intensity, self._c, _ = _forward_rows(
            x, z, b, altitude, r_near, cell, az_spacing, n_range, cfg,
            want_cache=True)

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Adjoints of sum(upstream * intensity) w.r.t. every Z_k and B_k."""
        c = self._c
        cfg = self.cfg
        up = np.ascontiguousarray(upstream, dtype=np.float64)
        n_rows, n_pts = c["x"].shape
        n_range = c["n_range"]
        if up.shape != (n_rows, n_range):
            raise ValueError(f"upstream must have shape {(n_rows, n_range)}")

        alt = c["altitude"][:, None]
        az = c["az_spacing"][:, None]
        d_lo = c["d"][:, :-1]
        d_hi = c["d"][:, 1:]
        live = ~c["deg"]
        up_flat = up.ravel()
        row_base = np.arange(n_rows)[:, None] * n_range

        amp_bar = np.zeros_like(c["amp"])
        vhat_bar = np.zeros_like(c["vhat"])
        dlo_bar = np.zeros_like(d_lo)
        dhi_bar = np.zeros_like(d_hi)
        mu = cfg.smoothing
        for off in range(c["span"]):
            m = c["m_start"] + off
            valid = off < c["n_cells"]
            m_safe = np.minimum(m, n_range - 1)
            u = np.where(valid, up_flat[row_base + m_safe], 0.0)
            r_lo = c["r_near"][:, None] + m * c["cell"][:, None]
            r_hi = r_lo + c["cell"][:, None]
            num = (smooth_max(d_lo, r_hi, mu) + smooth_max(d_hi, r_lo, mu)
                   - smooth_max(d_hi, r_hi, mu) - smooth_max(d_lo, r_lo, mu))
            w_raw = num / c["safe_dd"]
            w = np.maximum(w_raw, 0.0)
            if np.any(c["deg"]):
                w_deg = ((c["mid"] >= r_lo) & (c["mid"] < r_hi)).astype(np.float64)
                w = np.where(c["deg"], w_deg, w)
            wu = w * u
            amp_bar += az * c["vhat"] * wu
            vhat_bar += az * c["amp"] * wu
            # Truncated lobes (w_raw <= 0) pass no gradient to the endpoints.
            w_bar = az * c["amp"] * c["vhat"] * u * (w_raw > 0)
            # Each endpoint enters two of the four smooth-max terms; the
            # quotient rule adds the +/- w terms from the 1/(d_hi-d_lo).
            dnum_dlo = (_dmax_dfirst(d_lo - r_hi, mu)
                        - _dmax_dfirst(d_lo - r_lo, mu))
            dnum_dhi = (_dmax_dfirst(d_hi - r_lo, mu)
                        - _dmax_dfirst(d_hi - r_hi, mu))
            dw_dlo = (dnum_dlo + w) / c["safe_dd"]
            dw_dhi = (dnum_dhi - w) / c["safe_dd"]
            dlo_bar += np.where(live, w_bar * dw_dlo, 0.0)
            dhi_bar += np.where(live, w_bar * dw_dhi, 0.0)

        # amp = bm * |q| / rm
        q = c["q"]
        rm = c["rm"]
        bm_bar = amp_bar * np.abs(q) / rm
        q_bar = amp_bar * c["bm"] * np.sign(q) / rm
        rm_bar = -amp_bar * c["bm"] * np.abs(q) / (rm * rm)
        zm_bar = q_bar * c["dx_"] + rm_bar * (c["zm"] - alt) / rm
        dz_bar = -q_bar * c["xm"]

        eta_bar = self._shadow_reverse(vhat_bar)

        z_bar = np.zeros((n_rows, n_pts))
        z_bar[:, :-1] += 0.5 * zm_bar - dz_bar
        z_bar[:, 1:] += 0.5 * zm_bar + dz_bar
        d_bar = np.zeros((n_rows, n_pts))
        d_bar[:, :-1] += dlo_bar
        d_bar[:, 1:] += dhi_bar
        z_bar += d_bar * (c["z"] - alt) / c["d"]
        z_bar += eta_bar / c["x"]

        b_bar = np.zeros((n_rows, n_pts))
        b_bar[:, :-1] += 0.5 * bm_bar
        b_bar[:, 1:] += 0.5 * bm_bar
        return z_bar, b_bar

    def _shadow_reverse(self, vhat_bar: np.ndarray) -> np.ndarray:
        """Reverse scan of the gate recursion; O(K) like the forward pass."""
        c = self._c
        xi = self.cfg.steepness
        v, arg = c["v"], c["arg"]
        n_rows, n_seg = vhat_bar.shape
        eta_bar = np.zeros((n_rows, n_seg + 1))
        h_bar = np.zeros(n_rows)
        for k in range(n_seg - 1, -1, -1):
            vk = v[:, k + 1]
            v_bar = vhat_bar[:, k] + h_bar * arg[:, k]
            a_bar = v_bar * xi * vk * (1.0 - vk)
            eta_bar[:, k + 1] += h_bar * vk + a_bar
            h_bar = h_bar * (1.0 - vk) - a_bar
        eta_bar[:, 0] += h_bar
        return eta_bar


def grad_render_row(line: SampleLine, view: ViewGeometry, cfg: RenderConfig,
                    upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjoints of one row: upstream dL/dI per cell -> dL/dZ_k, dL/dB_k."""
    cfg = cfg.resolve(view)
    tape = RowBatchTape(
        line.ground_range[None, :], line.elevation[None, :],
        line.backscatter[None, :], view.altitude, view.near_slant_range,
        view.slant_cell, view.azimuth_spacing, view.n_range, cfg)
    z_bar, b_bar = tape.backward(np.asarray(upstream, dtype=np.float64)[None, :])
    return z_bar[0], b_bar[0]


@dataclass
class FdReport:
    """Per-coordinate comparison between central differences and analytic grads."""

    fd: np.ndarray
    analytic: np.ndarray
    rel_error: np.ndarray
    max_rel: float
    p99_rel: float
    nonfinite: np.ndarray

    def passes(self, p99_tol: float = 1e-4, max_tol: float = 1e-2) -> bool:
        return (not self.nonfinite.any()
                and self.p99_rel <= p99_tol and self.max_rel <= max_tol)


def fd_gradient(f, point, steps=None):
    """Central-difference gradient of a scalar function of a flat vector.

    Step defaults to 1e-5 * max(1, |x_i|) per coordinate, balancing
    truncation against rounding in double precision. Returns
    (gradient, nonfinite_mask); coordinates whose perturbed evaluations
    are not finite are flagged rather than raising.
    """
    x = np.asarray(point, dtype=np.float64).copy()
    if steps is None:
        steps = 1e-5 * np.maximum(1.0, np.abs(x))
    else:
        steps = np.broadcast_to(np.asarray(steps, dtype=np.float64), x.shape).copy()
    grad = np.zeros_like(x)
    bad = np.zeros(x.shape, dtype=bool)
    for i in range(x.size):
        h = steps.flat[i]
        orig = x.flat[i]
        x.flat[i] = orig + h
        f_hi = f(x)
        x.flat[i] = orig - h
        f_lo = f(x)
        x.flat[i] = orig
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            bad.flat[i] = True
            continue
        grad.flat[i] = (f_hi - f_lo) / (2.0 * h)
    return grad, bad


def fd_check(f, point, analytic, steps=None) -> FdReport:
    """Compare an analytic gradient against central differences.

    The relative error of coordinate i uses a denominator floored at 1e-6
    of the largest gradient magnitude, so coordinates that are numerically
    dead (both sides ~0) do not register spurious failures while genuinely
    wrong components still do.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    fd, bad = fd_gradient(f, point, steps)
    scale = max(np.max(np.abs(analytic), initial=0.0),
                np.max(np.abs(fd), initial=0.0))
    floor = 1e-6 * scale + 1e-300
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), floor)
    rel = np.abs(fd - analytic) / denom
    rel[bad] = np.inf
    good = rel[~bad] if bad.any() else rel
    return FdReport(
        fd=fd,
        analytic=analytic,
        rel_error=rel,
        max_rel=float(rel.max(initial=0.0)),
        p99_rel=float(np.quantile(good, 0.99)) if good.size else 0.0,
        nonfinite=bad,
    )
