"""Learnable surface: multiresolution hash encoding feeding a small MLP.

The field maps a ground position (x, y) to an elevation Z and a
backscatter coefficient B. Positions are normalized into the unit square
of the scene bounding box and encoded by bilinear lookups into per-level
feature tables of geometrically growing resolution; fine levels share
table entries through a spatial hash. An arctan output activation bounds
elevations to (-side*pi/16, +side*pi/16) and an exponential keeps
backscatter positive, so a freshly initialized field renders as nearly
flat terrain of unit backscatter.

Per-level window weights let callers fade out frequency bands whose grid
cells are finer than the local sample spacing; the trainer drives them
from each line's spacing, evaluation uses all-ones.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

CHECKPOINT_MAGIC = b"SARF"
CHECKPOINT_VERSION = 1

# Odd hash constants for the corner-to-table index (fine levels only).
HASH_PRIME_X = 2654435761
HASH_PRIME_Y = 805459861

RAW_B_CLAMP = 30.0


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class HashEncodingConfig:
    levels: int = 12
    features: int = 2
    base_resolution: int = 16
    growth: float = 1.5
    table_size: int = 1 << 16

    def __post_init__(self):
        if self.levels < 1 or self.features < 1:
            raise ValueError("need at least one level and one feature")
        if self.base_resolution < 2 or self.growth <= 1.0:
            raise ValueError("base resolution >= 2 and growth > 1 required")
        t = self.table_size
        if t < self.base_resolution ** 2 or (t & (t - 1)) != 0:
            raise ValueError("table size must be a power of two >= base_resolution^2")

    def resolution(self, level: int) -> int:
        return int(np.floor(self.base_resolution * self.growth ** level))

    @property
    def out_dim(self) -> int:
        return self.levels * self.features


@dataclass(frozen=True)
class FieldConfig:
    box_x0: float = 0.0
    box_y0: float = 0.0
    box_side: float = 1000.0
    encoding: HashEncodingConfig = dc_field(default_factory=HashEncodingConfig)
    hidden_width: int = 64
    hidden_layers: int = 2

    def __post_init__(self):
        if self.box_side <= 0:
            raise ValueError("bounding box side must be positive")
        if self.hidden_width < 1 or self.hidden_layers < 1:
            raise ValueError("MLP needs at least one hidden layer of width >= 1")

    @property
    def elevation_bound(self) -> float:
        """Largest |Z| the arctan output head can produce."""
        return self.box_side * np.pi / 16.0


def _corner_indices(cfg: HashEncodingConfig, level: int, ix, iy):
    """Table index of integer corner (ix, iy) at one level.

    Levels whose full corner grid fits in the table are indexed directly
    (collision free); finer levels go through the spatial hash.
    """
    res = cfg.resolution(level)
    if (res + 1) ** 2 <= cfg.table_size:
        return iy * (res + 1) + ix
    h = (ix * HASH_PRIME_X) ^ (iy * HASH_PRIME_Y)
    return h & (cfg.table_size - 1)


def encode(cfg: HashEncodingConfig, tables: np.ndarray, points: np.ndarray,
           want_cache: bool = False, active=None):
    """Multiresolution features for normalized points in the unit square.

    ``tables`` is (levels, table_size, features); returns (N, levels,
    features) plus, when requested, the corner indices and bilinear
    weights each level used (needed to scatter gradients back). ``active``
    marks levels worth evaluating; levels whose window weight is zero for
    every point in the batch produce zero features either way, so they are
    skipped when masked out.
    """
    pts = np.clip(np.asarray(points, dtype=np.float64), 0.0, 1.0)
    if pts.ndim == 1:
        pts = pts[None, :]
    n = pts.shape[0]
    feats = np.zeros((n, cfg.levels, cfg.features))
    cache = [None] * cfg.levels if want_cache else None
    for level in range(cfg.levels):
        if active is not None and not active[level]:
            continue
        res = cfg.resolution(level)
        scaled = pts * res
        c0 = np.minimum(scaled.astype(np.int64), res - 1)
        f = scaled - c0
        ix, iy = c0[:, 0], c0[:, 1]
        fx, fy = f[:, 0], f[:, 1]
        idx = np.stack([
            _corner_indices(cfg, level, ix, iy),
            _corner_indices(cfg, level, ix + 1, iy),
            _corner_indices(cfg, level, ix, iy + 1),
            _corner_indices(cfg, level, ix + 1, iy + 1),
        ], axis=1)
        w = np.stack([
            (1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy,
        ], axis=1)
        feats[:, level, :] = np.einsum("nc,ncf->nf", w, tables[level][idx])
        if want_cache:
            cache[level] = (idx, w)
    return (feats, cache) if want_cache else feats


def window_weights(cfg: HashEncodingConfig, box_side: float, spacing):
    """Per-level fade weights for a sample spacing in meters.

    The target level is the one whose grid cell matches the spacing; finer
    levels ease to zero with a raised-cosine so outputs stay continuous as
    the spacing changes.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    if np.any(spacing <= 0):
        raise ValueError("spacing must be positive")
    alpha = np.log(box_side / (spacing * cfg.base_resolution)) / np.log(cfg.growth)
    alpha = np.clip(alpha, 0.0, cfg.levels)
    levels = np.arange(cfg.levels)
    ramp = np.clip(alpha[..., None] - levels, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * ramp))


class NeuralSurfaceField:
    """Hash-encoded MLP surface; implements the SurfaceProvider protocol.

    Parameters live in ``self.params`` as a flat dict of float64 arrays:
    "tables" plus "w0"/"b0" ... for each MLP layer. Reads are safe from
    any number of threads; training updates them in place from a single
    writer.
    """

    def __init__(self, config: FieldConfig, seed: int = 0):
        self.config = config
        enc = config.encoding
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {
            "tables": rng.uniform(-1e-4, 1e-4,
                                  (enc.levels, enc.table_size, enc.features)),
        }
        dims = [enc.out_dim] + [config.hidden_width] * config.hidden_layers + [2]
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(d_in)
            self.params[f"w{i}"] = rng.uniform(-bound, bound, (d_in, d_out))
            self.params[f"b{i}"] = np.zeros(d_out)
        self.iteration = 0
        self._n_layers = len(dims) - 1

    def _normalize(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[None, :]
        c = self.config
        return np.clip((pts - [c.box_x0, c.box_y0]) / c.box_side, 0.0, 1.0)

    def forward(self, points, spacing=None, want_cache: bool = False):
        """(Z, B[, cache]) at world points; spacing drives the level window."""
        c = self.config
        enc = c.encoding
        p = self._normalize(points)
        if spacing is None:
            omega = np.ones((p.shape[0], enc.levels))
            active = None
        else:
            spac = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (p.shape[0],))
            omega = window_weights(enc, c.box_side, spac)
            active = omega.max(axis=0) > 0.0
        feats, enc_cache = encode(enc, self.params["tables"], p,
                                  want_cache=True, active=active)
        windowed = (feats * omega[:, :, None]).reshape(p.shape[0], enc.out_dim)

        acts = [windowed]
        pre = []
        h = windowed
        for i in range(self._n_layers):
            lin = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
            pre.append(lin)
            h = np.maximum(lin, 0.0) if i < self._n_layers - 1 else lin
            acts.append(h)
        raw = acts[-1]
        raw_b = np.clip(raw[:, 1], -RAW_B_CLAMP, RAW_B_CLAMP)
        elevation = (c.box_side / 8.0) * np.arctan(raw[:, 0])
        backscatter = np.exp(raw_b)
        if not want_cache:
            return elevation, backscatter
        cache = {"acts": acts, "pre": pre, "raw": raw, "omega": omega,
                 "feats": feats, "enc_cache": enc_cache,
                 "backscatter": backscatter}
        return elevation, backscatter, cache

    def query(self, points, spacing=None):
        return self.forward(points, spacing=spacing)

    def backward(self, cache, elevation_bar, backscatter_bar) -> dict[str, np.ndarray]:
        """Parameter gradients from per-point output adjoints.

        Deterministic: corner contributions are reduced with bincount in a
        fixed order, so repeated calls give identical arrays.
        """
        c = self.config
        enc = c.encoding
        raw = cache["raw"]
        out_bar = np.empty_like(raw)
        out_bar[:, 0] = elevation_bar * (c.box_side / 8.0) / (1.0 + raw[:, 0] ** 2)
        inside = np.abs(raw[:, 1]) < RAW_B_CLAMP
        out_bar[:, 1] = backscatter_bar * cache["backscatter"] * inside

        grads: dict[str, np.ndarray] = {}
        delta = out_bar
        for i in range(self._n_layers - 1, -1, -1):
            h_in = cache["acts"][i]
            grads[f"w{i}"] = h_in.T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.params[f"w{i}"].T) * (cache["pre"][i - 1] > 0)
        enc_bar = delta @ self.params["w0"].T
        n = raw.shape[0]
        enc_bar = enc_bar.reshape(n, enc.levels, enc.features) * cache["omega"][:, :, None]
        t_grad = np.zeros_like(self.params["tables"])
        for level in range(enc.levels):
            if cache["enc_cache"][level] is None:
                continue
            idx, w = cache["enc_cache"][level]
            flat_idx = idx.ravel()
            for f in range(enc.features):
                contrib = (w * enc_bar[:, level, f][:, None]).ravel()
                t_grad[level, :, f] += np.bincount(
                    flat_idx, weights=contrib, minlength=enc.table_size)
        grads["tables"] = t_grad
        return grads

    # -- flat parameter vector helpers (finite-difference harness) --------

    def _param_names(self):
        return ["tables"] + [f"{kind}{i}" for i in range(self._n_layers)
                             for kind in ("w", "b")]

    def params_vector(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self._param_names()])

    def set_params_vector(self, vec: np.ndarray) -> None:
        off = 0
        for k in self._param_names():
            size = self.params[k].size
            self.params[k][...] = vec[off:off + size].reshape(self.params[k].shape)
            off += size
        if off != vec.size:
            raise ValueError("parameter vector has the wrong length")

    def grads_vector(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in self._param_names()])


def save_checkpoint(path, field: NeuralSurfaceField) -> None:
    """Write config echo plus all parameter arrays (float32 payload)."""
    cfg = field.config
    meta = {
        "box_x0": cfg.box_x0, "box_y0": cfg.box_y0, "box_side": cfg.box_side,
        "encoding": asdict(cfg.encoding),
        "hidden_width": cfg.hidden_width, "hidden_layers": cfg.hidden_layers,
        "iteration": field.iteration,
        "arrays": field._param_names(),
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<BI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name in field._param_names():
            fh.write(np.ascontiguousarray(field.params[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> NeuralSurfaceField:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 9 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a field checkpoint")
    version, meta_len = struct.unpack_from("<BI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(data[9:9 + meta_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt config block") from exc
    cfg = FieldConfig(
        box_x0=meta["box_x0"], box_y0=meta["box_y0"], box_side=meta["box_side"],
        encoding=HashEncodingConfig(**meta["encoding"]),
        hidden_width=meta["hidden_width"], hidden_layers=meta["hidden_layers"])
    out = NeuralSurfaceField(cfg, seed=0)
    off = 9 + meta_len
    for name in meta["arrays"]:
        shape = out.params[name].shape
        count = out.params[name].size
        end = off + 4 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated parameter payload")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        out.params[name] = arr.reshape(shape).astype(np.float64)
        off = end
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    out.iteration = int(meta.get("iteration", 0))
    return out
