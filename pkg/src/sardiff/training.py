"""Minibatch inverse-rendering loop: loss, schedule, optimizer, fit.

Each iteration draws a random set of azimuth rows across all views,
renders them with the current coarse-to-fine settings, scores them
against the observed noisy rows under the speckle likelihood plus a total
variation penalty on backscatter, and applies one adaptive-moment update
to the field parameters.

The coarse-to-fine schedule anneals a subsampling factor from its initial
value down to 1 over the first part of training: fewer, larger patches
and stronger smoothing early on, full resolution afterwards.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .adjoint import RowBatchTape
from .dataset import SarDataset
from .field import NeuralSurfaceField, save_checkpoint
from .geometry import line_positions, swath_footprint
from .renderer import RenderConfig

METRIC_FIELDS = ("iteration", "loss_data", "loss_tv", "beta", "samples",
                 "smoothing", "wall_time")


def speckle_nll(pred: np.ndarray, obs: np.ndarray) -> float:
    """Mean per-pixel log(pred/obs) + obs/pred.

    The negative log-likelihood of observed single-look intensities given
    speckle-free predictions, up to a constant; equals 1.0 exactly when
    pred == obs and grows otherwise. Predictions are floored at
    1e-12 * mean(obs) so empty cells in early renders cannot blow up the
    log or the ratio.
    """
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if np.any(obs <= 0):
        raise ValueError("observed intensities must be strictly positive")
    floor = 1e-12 * float(obs.mean())
    p = np.maximum(pred, floor)
    return float(np.mean(np.log(p / obs) + obs / p))


def speckle_nll_grad(pred: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """d speckle_nll / d pred, zero where the prediction sits on the floor."""
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    floor = 1e-12 * float(obs.mean())
    p = np.maximum(pred, floor)
    g = (1.0 / p - obs / (p * p)) / pred.size
    return np.where(pred > floor, g, 0.0)


def tv_penalty(b_lines: np.ndarray) -> float:
    """Mean absolute backscatter step along each line, averaged over lines."""
    b = np.atleast_2d(np.asarray(b_lines, dtype=np.float64))
    if b.shape[1] < 2:
        raise ValueError("total variation needs at least 2 samples per line")
    return float(np.mean(np.abs(np.diff(b, axis=1))))


def tv_grad(b_lines: np.ndarray) -> np.ndarray:
    b = np.atleast_2d(np.asarray(b_lines, dtype=np.float64))
    steps = np.sign(np.diff(b, axis=1)) / (b.shape[0] * (b.shape[1] - 1))
    g = np.zeros_like(b)
    g[:, 1:] += steps
    g[:, :-1] -= steps
    return g


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; ``None`` fields resolve from the dataset geometry."""

    iterations: int = 2000
    rows_per_batch: int | None = None     # >= 80 keeps sample coverage healthy
    samples_target: int | None = None     # segments per line at full resolution
    smoothing_target: float | None = None  # meters, at full resolution
    steepness_target: float | None = None  # shadow gate, at full resolution
    beta0: float = 4.0                    # initial subsampling factor
    anneal_fraction: float = 0.5
    tv_weight: float = 0.1
    lr_tables: float = 1e-2
    lr_mlp: float = 1e-3
    momentum_decay: float = 0.9
    variance_decay: float = 0.99
    adam_eps: float = 1e-8
    lr_floor: float = 0.1                 # cosine decay down to this fraction
    grad_clip: float = 10.0               # global gradient norm cap (0 disables)
    window_floor_factor: float = 2.0      # min window spacing, in ground cells
    ema_decay: float = 0.999              # parameter averaging (0 disables)
    margin: float | None = None
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.beta0 < 1:
            raise ValueError("beta0 must be at least 1")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be non-negative")
        if self.rows_per_batch is not None and self.rows_per_batch < 1:
            raise ValueError("rows_per_batch must be positive")
        if self.samples_target is not None and self.samples_target < 2:
            raise ValueError("samples_target must be at least 2")

    def resolve(self, dataset: SarDataset) -> "TrainConfig":
        view = dataset.views[0]
        _, x_far = swath_footprint(view)
        rows = (self.rows_per_batch if self.rows_per_batch is not None
                else max(80, 16 * dataset.n_views))
        samples = (self.samples_target if self.samples_target is not None
                   else 8 * view.n_range)
        smoothing = (self.smoothing_target if self.smoothing_target is not None
                     else view.slant_cell / 4.0)
        # Steeper than the renderer's inspection default: flat terrain must
        # sit in the gate's saturated region or its gradient exerts a
        # spurious systematic pull on elevations.
        steepness = (self.steepness_target if self.steepness_target is not None
                     else 25.0 * x_far / view.slant_cell)
        if samples < 2:
            raise ValueError("samples_target must be at least 2")
        return replace(self, rows_per_batch=rows, samples_target=samples,
                       smoothing_target=smoothing, steepness_target=steepness)


@dataclass(frozen=True)
class ScheduleState:
    iteration: int
    beta: float
    samples: int
    smoothing: float
    steepness: float


def schedule_step(cfg: TrainConfig, t: int) -> ScheduleState:
    """Coarse-to-fine state at iteration t.

    The subsampling factor decays exponentially in log space from beta0 to
    exactly 1 at the anneal horizon and stays 1 afterwards; sample count
    grows and smoothing shrinks proportionally.
    """
    if None in (cfg.samples_target, cfg.smoothing_target, cfg.steepness_target):
        raise ValueError("config must be resolved against a dataset first")
    horizon = cfg.anneal_fraction * cfg.iterations
    progress = 1.0 if horizon <= 0 else min(t / horizon, 1.0)
    beta = float(cfg.beta0 ** (1.0 - progress))
    samples = max(int(round(cfg.samples_target / beta)), 2)
    return ScheduleState(
        iteration=t,
        beta=beta,
        samples=samples,
        smoothing=cfg.smoothing_target * beta,
        steepness=cfg.steepness_target / beta,
    )


class AdamOptimizer:
    """Adaptive-moment updates with per-array learning rates."""

    def __init__(self, params: dict[str, np.ndarray], rates: dict[str, float],
                 momentum_decay: float = 0.9, variance_decay: float = 0.99,
                 eps: float = 1e-8):
        self.params = params
        self.rates = rates
        self.b1 = momentum_decay
        self.b2 = variance_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            self.params[k] -= (self.rates[k] * scale) * m_hat / (np.sqrt(v_hat) + self.eps)


def _learning_rates(field: NeuralSurfaceField, cfg: TrainConfig) -> dict[str, float]:
    return {k: (cfg.lr_tables if k == "tables" else cfg.lr_mlp)
            for k in field.params}


def _draw_rows(dataset: SarDataset, count: int, rng) -> list[tuple[int, int]]:
    counts = np.array([v.n_azimuth for v in dataset.views])
    edges = np.concatenate([[0], np.cumsum(counts)])
    flat = rng.integers(0, edges[-1], size=count)
    view_idx = np.searchsorted(edges, flat, side="right") - 1
    return [(int(v), int(flat[i] - edges[v])) for i, v in enumerate(view_idx)]


def train_step(field: NeuralSurfaceField, dataset: SarDataset, cfg: TrainConfig,
               state: ScheduleState, rng) -> dict:
    """One minibatch update; returns the iteration's metric row.

    Raises RuntimeError with the offending (view, row) pairs if the loss
    goes non-finite, rather than silently continuing.
    """
    m_rows = cfg.rows_per_batch
    k = state.samples
    pairs = _draw_rows(dataset, m_rows, rng)
    jitters = rng.uniform(-0.5, 0.5, size=m_rows)

    # One-look speckle varies per range cell; letting the field keep
    # frequencies finer than the resolution cell just hands it capacity to
    # memorize that noise. The window spacing is therefore floored at a
    # fraction of the ground cell (scaled up while coarse), but never so
    # far that even the coarsest encoding level closes.
    enc = field.config.encoding
    coarse_cap = field.config.box_side / (enc.base_resolution * enc.growth ** 0.75)
    spacing_floor = min(cfg.window_floor_factor * dataset.ground_cell * state.beta,
                        coarse_cap)

    xs = np.empty((m_rows, k + 1))
    worlds = np.empty((m_rows, k + 1, 2))
    spacings = np.empty(m_rows)
    geom = {key: np.empty(m_rows) for key in ("alt", "r0", "cell", "az")}
    obs = np.empty((m_rows, dataset.n_range))
    for i, (vi, row) in enumerate(pairs):
        view = dataset.views[vi]
        gr, world, spacing = line_positions(view, row, k, float(jitters[i]),
                                            cfg.margin)
        xs[i] = gr
        worlds[i] = world
        spacings[i] = max(spacing, spacing_floor)
        geom["alt"][i] = view.altitude
        geom["r0"][i] = view.near_slant_range
        geom["cell"][i] = view.slant_cell
        geom["az"][i] = view.azimuth_spacing
        obs[i] = dataset.images[vi][row]

    points = worlds.reshape(-1, 2)
    point_spacing = np.repeat(spacings, k + 1)
    elev, back, cache = field.forward(points, spacing=point_spacing, want_cache=True)
    z = elev.reshape(m_rows, k + 1)
    b = back.reshape(m_rows, k + 1)

    render_cfg = RenderConfig(smoothing=state.smoothing, steepness=state.steepness,
                              samples=k, margin=cfg.margin)
    tape = RowBatchTape(xs, z, b, geom["alt"], geom["r0"], geom["cell"],
                        geom["az"], dataset.n_range, render_cfg)
    loss_data = speckle_nll(tape.intensity, obs)
    loss_tv = tv_penalty(b)
    total = loss_data + cfg.tv_weight * loss_tv
    row_ok = (np.isfinite(z).all(axis=1) & np.isfinite(b).all(axis=1)
              & np.isfinite(tape.intensity).all(axis=1))
    if not (np.isfinite(total) and row_ok.all()):
        culprits = [pairs[i] for i in np.nonzero(~row_ok)[0]] or pairs
        raise RuntimeError(
            f"non-finite loss at iteration {state.iteration}; "
            f"offending (view, row) pairs: {culprits[:8]}")

    upstream = speckle_nll_grad(tape.intensity, obs)
    z_bar, b_bar = tape.backward(upstream)
    b_bar += cfg.tv_weight * tv_grad(b)
    grads = field.backward(cache, z_bar.ravel(), b_bar.ravel())
    grad_norm = clip_gradients(grads, cfg.grad_clip)
    return {"loss_data": loss_data, "loss_tv": loss_tv, "grads": grads,
            "grad_norm": grad_norm}


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint norm stays below ``max_norm``.

    Rendered cells sitting just above the intensity floor can emit
    astronomically large per-pixel loss slopes; left unclipped, one such
    pixel poisons the optimizer's variance estimates for hundreds of
    iterations. Returns the pre-clip norm.
    """
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def _lr_scale(cfg: TrainConfig, t: int) -> float:
    if cfg.iterations <= 0:
        return 1.0
    cos = 0.5 * (1.0 + np.cos(np.pi * t / cfg.iterations))
    return cfg.lr_floor + (1.0 - cfg.lr_floor) * cos


def fit(field: NeuralSurfaceField, dataset: SarDataset, cfg: TrainConfig,
        out_dir=None, on_metrics=None) -> list[dict]:
    """Run the full schedule from the field's current iteration.

    Appends one metrics row per iteration to ``metrics.csv`` under
    ``out_dir`` (when given), checkpoints periodically and at the end, and
    returns the collected metric rows. Deterministic for a fixed seed and
    thread count; each iteration reseeds from (seed, iteration) so resumed
    runs draw the same minibatches as uninterrupted ones.

    With ``ema_decay`` > 0 the field finishes on a bias-corrected
    exponential moving average of its parameter trajectory, which averages
    out the per-batch speckle chasing; checkpoints along the way hold the
    same averaged parameters. Resuming restarts the average (and the
    optimizer moments) from the stored parameters.
    """
    cfg = cfg.resolve(dataset)
    optimizer = AdamOptimizer(field.params, _learning_rates(field, cfg),
                              cfg.momentum_decay, cfg.variance_decay, cfg.adam_eps)
    ema = ({k: np.zeros_like(v) for k, v in field.params.items()}
           if cfg.ema_decay > 0 else None)
    ema_steps = 0

    def averaged_params():
        corr = 1.0 - cfg.ema_decay ** ema_steps
        return {k: v / corr for k, v in ema.items()}
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.csv"
        fresh = not log_path.exists()
        log_fh = open(log_path, "a", newline="")
        writer = csv.writer(log_fh)
        if fresh:
            writer.writerow(METRIC_FIELDS)

    metrics: list[dict] = []
    start_t = field.iteration
    t0 = time.perf_counter()
    try:
        for t in range(start_t, cfg.iterations):
            state = schedule_step(cfg, t)
            rng = np.random.default_rng([cfg.seed, t])
            step = train_step(field, dataset, cfg, state, rng)
            optimizer.step(step["grads"], _lr_scale(cfg, t))
            if ema is not None:
                ema_steps += 1
                for k, v in field.params.items():
                    ema[k] = cfg.ema_decay * ema[k] + (1.0 - cfg.ema_decay) * v
            field.iteration = t + 1
            row = {
                "iteration": t,
                "loss_data": step["loss_data"],
                "loss_tv": step["loss_tv"],
                "beta": state.beta,
                "samples": state.samples,
                "smoothing": state.smoothing,
                "wall_time": time.perf_counter() - t0,
            }
            metrics.append(row)
            if writer is not None:
                writer.writerow([row[k] for k in METRIC_FIELDS])
            if on_metrics is not None:
                on_metrics(row)
            if out is not None and cfg.checkpoint_every > 0 \
                    and (t + 1) % cfg.checkpoint_every == 0:
                if ema is not None:
                    live = {k: v.copy() for k, v in field.params.items()}
                    field.params.update(averaged_params())
                    save_checkpoint(out / "checkpoint.sarf", field)
                    field.params.update(live)
                else:
                    save_checkpoint(out / "checkpoint.sarf", field)
    finally:
        if log_fh is not None:
            log_fh.close()
    if ema is not None and ema_steps > 0:
        field.params.update(averaged_params())
    if out is not None:
        save_checkpoint(out / "checkpoint.sarf", field)
    return metrics
