"""Command-line entry point: dataset synthesis, rendering, training, evaluation.

Subcommands mirror the experiment lifecycle: ``synth`` writes a multi-view
dataset, ``render`` images a scene with either engine, ``train`` fits the
neural surface, ``eval`` scores a checkpoint against the ground truth, and
``pipeline`` chains all four. ``bench`` runs the performance cases.

Every command echoes its fully resolved configuration into the output
directory as run_config.json, so a run is reproducible from that file and
the seed alone. Exit codes: 0 success, 2 configuration/validation error,
3 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _threads_from_argv(argv) -> None:
    # BLAS pools must be capped before numpy loads; peek at argv manually.
    n = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif arg.startswith("--threads="):
            n = arg.split("=", 1)[1]
    if n is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(n)


class CliError(Exception):
    """Configuration problem; message names the offending field."""


def _write_run_config(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_config.json", "w") as fh:
        json.dump({"command": command, **payload}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"config file {path}: {exc}") from exc


def _merged(args, config_file_keys: dict, names: list[str]) -> dict:
    """Config-file values overridden by any explicitly passed flags."""
    merged = dict(config_file_keys)
    for name in names:
        val = getattr(args, name, None)
        if val is not None:
            merged[name] = val
    return merged


def cmd_synth(args) -> int:
    import numpy as np
    from .field import FieldConfig
    from .oracle import OracleConfig, make_dataset, make_views
    from .scene import SCENE_KINDS, make_synthetic_scene

    cfg_file = _load_config_file(args.config)
    opt = _merged(args, cfg_file, [
        "scene", "views", "seed", "rows", "cols", "size", "incidence",
        "n_range", "n_azimuth", "looks", "supersampling", "material",
        "material_exponent", "amplitude", "heading_offset_deg"])
    opt.setdefault("rows", 128)
    opt.setdefault("cols", 128)
    opt.setdefault("size", 1000.0)
    opt.setdefault("incidence", 45.0)
    opt.setdefault("n_range", 96)
    opt.setdefault("n_azimuth", 96)
    opt.setdefault("looks", 1)
    opt.setdefault("supersampling", 32)
    opt.setdefault("material", "cosine")
    opt.setdefault("material_exponent", 2.0)
    opt.setdefault("seed", 0)
    opt.setdefault("views", 5)
    opt.setdefault("heading_offset_deg", 0.0)

    kind = str(opt.get("scene", "")).replace("-", "_")
    if kind not in SCENE_KINDS:
        raise CliError(f"scene: unknown kind {opt.get('scene')!r}, "
                       f"expected one of {[k.replace('_','-') for k in SCENE_KINDS]}")
    if int(opt["views"]) < 1:
        raise CliError("views: need at least 1")
    if int(opt["looks"]) < 1:
        raise CliError("looks: must be at least 1")
    if int(opt["supersampling"]) < 4:
        raise CliError("supersampling: must be at least 4")

    scene_params = {}
    if opt.get("amplitude") is not None:
        scene_params["amplitude"] = float(opt["amplitude"])
    scene = make_synthetic_scene(kind, int(opt["seed"]), int(opt["rows"]),
                                 int(opt["cols"]), float(opt["size"]),
                                 **scene_params)
    # The arctan head cannot represent relief beyond side*pi/16; refuse
    # scenes a default-config field could never fit.
    bound = FieldConfig(box_side=float(opt["size"])).elevation_bound
    relief = float(np.abs(scene.elevation).max())
    if relief >= bound:
        raise CliError(
            f"size: relief {relief:.1f} m exceeds the representable bound "
            f"{bound:.1f} m for a box of side {opt['size']} m")

    views = make_views(*scene.center, float(opt["size"]), int(opt["views"]),
                       incidence_deg=float(opt["incidence"]),
                       n_range=int(opt["n_range"]),
                       n_azimuth=int(opt["n_azimuth"]),
                       heading_offset=float(np.radians(opt["heading_offset_deg"])))
    oracle_cfg = OracleConfig(
        supersampling=int(opt["supersampling"]), material=str(opt["material"]),
        material_exponent=float(opt["material_exponent"]),
        looks=int(opt["looks"]), seed=int(opt["seed"]))
    out = Path(args.out)
    manifest = make_dataset(scene, views, oracle_cfg, out)
    _write_run_config(out, "synth", opt)
    print(f"dataset written: {manifest}")
    return 0


def _view_from_args(args, scene):
    from .oracle import make_views

    return make_views(*scene.center, max(scene.side_x, scene.side_y), 1,
                      incidence_deg=args.incidence, n_range=args.n_range,
                      n_azimuth=args.n_azimuth)[0]


def cmd_render(args) -> int:
    import numpy as np
    from .evaluate import export_grayscale, log_intensity
    from .geometry import view_from_dict
    from .oracle import OracleConfig, oracle_render
    from .renderer import RenderConfig, render_image
    from .scene import read_raster, write_intensity

    scene = read_raster(args.scene)
    if args.manifest is not None:
        with open(args.manifest) as fh:
            manifest = json.load(fh)
        try:
            view = view_from_dict(manifest["views"][args.view_index])
        except IndexError as exc:
            raise CliError(f"view-index: manifest has "
                           f"{len(manifest['views'])} views") from exc
    else:
        view = _view_from_args(args, scene)

    if args.engine == "oracle":
        image = oracle_render(scene, view, OracleConfig(
            supersampling=args.supersampling, material=args.material,
            material_exponent=args.material_exponent))
    else:
        samples = args.k_per_cell * view.n_range if args.k_per_cell else None
        cfg = RenderConfig(hard=args.hard, samples=samples,
                           smoothing=args.smoothing, steepness=args.steepness)
        image = render_image(scene, view, cfg)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_intensity(out, image, dx=view.slant_cell, dy=view.azimuth_spacing)
    _write_run_config(out.parent, "render", {
        "engine": args.engine, "scene": str(args.scene), "out": str(out),
        "hard": args.hard, "k_per_cell": args.k_per_cell})
    print(f"intensity written: {out}  (mean {float(np.mean(image)):.4g})")
    if args.png:
        png = out.with_suffix(".png")
        export_grayscale(png, log_intensity(image))
        print(f"log-intensity preview: {png}")
    return 0


TRAIN_PROFILES = {
    "smoke": {"iterations": 200, "rows_per_batch": 32, "checkpoint_every": 100},
    # the profile used by the acceptance reconstructions
    "desk": {"iterations": 1600, "lr_tables": 3e-3, "lr_mlp": 1e-3,
             "checkpoint_every": 400},
}


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .field import FieldConfig, HashEncodingConfig, NeuralSurfaceField, load_checkpoint
    from .training import TrainConfig, fit

    cfg_file = _load_config_file(args.config)
    profile = dict(TRAIN_PROFILES.get(args.profile or "desk"))
    merged = {**profile, **cfg_file}
    overrides = _merged(args, {}, [
        "iterations", "rows_per_batch", "samples_target", "smoothing_target",
        "beta0", "anneal_fraction", "tv_weight", "lr_tables", "lr_mlp",
        "grad_clip", "seed", "checkpoint_every"])
    merged.update(overrides)

    dataset = load_dataset(args.dataset)
    try:
        train_cfg = TrainConfig(**{k: v for k, v in merged.items()
                                   if k in TrainConfig.__dataclass_fields__})
        train_cfg = train_cfg.resolve(dataset)
    except ValueError as exc:
        raise CliError(str(exc)) from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        field = load_checkpoint(args.resume)
    else:
        levels = int(merged.get("levels", 12))
        table_size = int(merged.get("table_size", 1 << 16))
        field = NeuralSurfaceField(FieldConfig(
            box_x0=dataset.box_x0, box_y0=dataset.box_y0,
            box_side=dataset.box_side,
            encoding=HashEncodingConfig(levels=levels, table_size=table_size)),
            seed=int(merged.get("seed", 0)))

    _write_run_config(out, "train", {
        "dataset": str(args.dataset), "resume": args.resume,
        "profile": args.profile,
        **{k: getattr(train_cfg, k) for k in TrainConfig.__dataclass_fields__}})
    metrics = fit(field, dataset, train_cfg, out_dir=out)
    last = metrics[-1] if metrics else {"loss_data": float("nan")}
    print(f"trained to iteration {field.iteration}; "
          f"final loss_data {last['loss_data']:.4f}; "
          f"checkpoint: {out / 'checkpoint.sarf'}")
    return 0


def cmd_eval(args) -> int:
    from .dataset import load_dataset
    from .evaluate import (GridSpec, evaluation_report, export_grayscale,
                           extract_dsm, log_intensity, save_panels, write_report)
    from .field import load_checkpoint
    from .scene import read_raster

    field = load_checkpoint(args.checkpoint)
    reference = read_raster(args.reference)
    dataset = load_dataset(args.dataset)
    pred = extract_dsm(field, GridSpec.like(reference))
    report = evaluation_report(pred, reference, dataset.views,
                               water_level=args.water_level,
                               min_views=args.min_views)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.csv", report)
    _write_run_config(out, "eval", {
        "checkpoint": str(args.checkpoint), "reference": str(args.reference),
        "dataset": str(args.dataset), "water_level": args.water_level,
        "min_views": args.min_views})
    print(f"masked RMSE: {report['rmse_m']:.3f} m over "
          f"{report['masked_cells']} cells; report: {out / 'report.csv'}")
    if args.png:
        save_panels(out, reference, pred, report["mask"], report["rmse_m"])
        export_grayscale(out / "dsm_pred.png", pred.elevation)
        export_grayscale(out / "dsm_ref.png", reference.elevation)
        export_grayscale(out / "backscatter_pred.png", pred.backscatter)
        if dataset.images:
            export_grayscale(out / "view00_log_intensity.png",
                             log_intensity(dataset.images[0]))
        print(f"panels written under {out}")
    return 0


def cmd_pipeline(args) -> int:
    base = Path(args.out)
    synth_ns = argparse.Namespace(
        scene=args.scene, views=args.views, seed=args.seed, out=str(base / "data"),
        config=None, rows=args.rows, cols=args.cols, size=args.size,
        incidence=None, n_range=args.n_range, n_azimuth=args.n_azimuth,
        looks=args.looks, supersampling=None, material=args.material,
        material_exponent=None, amplitude=args.amplitude, heading_offset_deg=None)
    rc = cmd_synth(synth_ns)
    if rc:
        return rc
    train_ns = argparse.Namespace(
        dataset=str(base / "data" / "manifest.json"), out=str(base / "train"),
        profile=args.profile, config=None, resume=None, iterations=args.iterations,
        rows_per_batch=None, samples_target=None, smoothing_target=None,
        beta0=None, anneal_fraction=None, tv_weight=None, lr_tables=None,
        lr_mlp=None, grad_clip=None, seed=args.seed, checkpoint_every=None)
    rc = cmd_train(train_ns)
    if rc:
        return rc
    eval_ns = argparse.Namespace(
        checkpoint=str(base / "train" / "checkpoint.sarf"),
        reference=str(base / "data" / "ground_truth.sarg"),
        dataset=str(base / "data" / "manifest.json"), out=str(base / "eval"),
        water_level=args.water_level, min_views=2, png=args.png)
    return cmd_eval(eval_ns)


def cmd_bench(args) -> int:
    from . import bench

    out = Path(args.out) if args.out else None
    rows = bench.run_cases(args.case, n_range=args.n_range, repeats=args.repeats)
    text = bench.format_rows(rows)
    print(text, end="")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        print(f"benchmark table written: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sardiff",
        description="Differentiable SAR rendering and multi-view surface "
                    "reconstruction toolkit")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP threads (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    s.add_argument("--scene", required=True,
                   help="flat-ramp | gaussian-hills | wall | island-two-materials")
    s.add_argument("--views", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None, help="JSON config file")
    s.add_argument("--rows", type=int, default=None)
    s.add_argument("--cols", type=int, default=None)
    s.add_argument("--size", type=float, default=None, help="box side, meters")
    s.add_argument("--incidence", type=float, default=None, help="degrees")
    s.add_argument("--n-range", dest="n_range", type=int, default=None)
    s.add_argument("--n-azimuth", dest="n_azimuth", type=int, default=None)
    s.add_argument("--looks", type=int, default=None)
    s.add_argument("--supersampling", type=int, default=None)
    s.add_argument("--material", default=None, help="cosine | power_cosine")
    s.add_argument("--material-exponent", dest="material_exponent",
                   type=float, default=None)
    s.add_argument("--amplitude", type=float, default=None,
                   help="terrain relief scale, meters")
    s.add_argument("--heading-offset-deg", dest="heading_offset_deg",
                   type=float, default=None)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("render", help="render one view of a scene raster")
    r.add_argument("--scene", required=True, help="two-channel scene raster")
    r.add_argument("--engine", choices=("fast", "oracle"), default="fast")
    r.add_argument("--manifest", default=None,
                   help="take geometry from this dataset manifest")
    r.add_argument("--view-index", dest="view_index", type=int, default=0)
    r.add_argument("--incidence", type=float, default=45.0)
    r.add_argument("--n-range", dest="n_range", type=int, default=96)
    r.add_argument("--n-azimuth", dest="n_azimuth", type=int, default=96)
    r.add_argument("--hard", action="store_true",
                   help="exact step/max instead of smooth gates")
    r.add_argument("--k-per-cell", dest="k_per_cell", type=int, default=None,
                   help="segments per range cell (fast engine)")
    r.add_argument("--smoothing", type=float, default=None)
    r.add_argument("--steepness", type=float, default=None)
    r.add_argument("--supersampling", type=int, default=32)
    r.add_argument("--material", default="cosine")
    r.add_argument("--material-exponent", dest="material_exponent",
                   type=float, default=2.0)
    r.add_argument("--out", required=True)
    r.add_argument("--png", action="store_true",
                   help="also write a log-scaled grayscale preview")
    r.set_defaults(func=cmd_render)

    t = sub.add_parser("train", help="fit the neural surface to a dataset")
    t.add_argument("--dataset", required=True, help="manifest.json path")
    t.add_argument("--out", required=True)
    t.add_argument("--profile", choices=tuple(TRAIN_PROFILES), default=None)
    t.add_argument("--config", default=None, help="JSON config file")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--rows-per-batch", dest="rows_per_batch", type=int, default=None)
    t.add_argument("--samples-target", dest="samples_target", type=int, default=None)
    t.add_argument("--smoothing-target", dest="smoothing_target", type=float,
                   default=None)
    t.add_argument("--beta0", type=float, default=None)
    t.add_argument("--anneal-fraction", dest="anneal_fraction", type=float,
                   default=None)
    t.add_argument("--tv-weight", dest="tv_weight", type=float, default=None)
    t.add_argument("--lr-tables", dest="lr_tables", type=float, default=None)
    t.add_argument("--lr-mlp", dest="lr_mlp", type=float, default=None)
    t.add_argument("--grad-clip", dest="grad_clip", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                   default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint against ground truth")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--reference", required=True, help="ground-truth scene raster")
    e.add_argument("--dataset", required=True, help="manifest for view geometry")
    e.add_argument("--out", required=True)
    e.add_argument("--water-level", dest="water_level", type=float, default=0.0)
    e.add_argument("--min-views", dest="min_views", type=int, default=2)
    e.add_argument("--png", action="store_true",
                   help="write comparison panels and grayscale exports")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("pipeline", help="synth + train + eval in one run")
    pl.add_argument("--scene", default="gaussian-hills")
    pl.add_argument("--views", type=int, default=5)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--out", required=True)
    pl.add_argument("--rows", type=int, default=128)
    pl.add_argument("--cols", type=int, default=128)
    pl.add_argument("--size", type=float, default=1000.0)
    pl.add_argument("--n-range", dest="n_range", type=int, default=96)
    pl.add_argument("--n-azimuth", dest="n_azimuth", type=int, default=96)
    pl.add_argument("--looks", type=int, default=1)
    pl.add_argument("--material", default="cosine")
    pl.add_argument("--amplitude", type=float, default=None)
    pl.add_argument("--profile", choices=tuple(TRAIN_PROFILES), default="desk")
    pl.add_argument("--iterations", type=int, default=None)
    pl.add_argument("--water-level", dest="water_level", type=float, default=0.0)
    pl.add_argument("--png", action="store_true")
    pl.set_defaults(func=cmd_pipeline)

    b = sub.add_parser("bench", help="performance cases (delimited output)")
    b.add_argument("--case", choices=("render", "train", "all"), default="all")
    b.add_argument("--n-range", dest="n_range", type=int, default=256)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _threads_from_argv(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
