"""``zonetrain`` command line.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 compute error.
Errors are also printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import datapipe as dp
from . import evalkit as ek
from . import geometry as geo
from . import ingest, report
from .config import ConfigError, RunConfig
from .errors import ComputeError, DataError, ZoneTrainError
from .model import NetworkConfig, ZoneNet, load_parameters, named_parameters, shape_trace
from .seeding import derive_seed
from .synthphantom import DEFAULT_PROFILES, generate_dataset
from .trainer import History, StrategyConfig, train

log = logging.getLogger("zonetrain")

CACHE_ENV = "ZONETRAIN_CACHE"
INCOMPLETE = "INCOMPLETE"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_COMPUTE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def format_lr(lr: float) -> str:
    """``5e-06`` -> ``5e-6``; plain decimals stay as they are."""
    text = f"{lr:g}"
    if "e" in text:
        mant, exp = text.split("e")
        text = f"{mant}e{int(exp)}"
    return text


# ------------------------------------------------------------------ helpers

def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_frames(cfg: RunConfig) -> tuple[list, str]:
    """Frames for a config plus a digest identifying the data source."""
    d = cfg.data
    if d["source"] == "container":
        return ingest.read_container(d["path"]), "sha256:" + ingest.file_digest(d["path"])
    frames = generate_dataset(cfg.frames_per_class(), DEFAULT_PROFILES, cfg.frame_geometry(), d.get("seed", 0))
    h = hashlib.sha256()
    for f in frames:
        h.update(f.frame_id.encode())
        h.update(np.ascontiguousarray(f.samples).tobytes())
    return frames, "synthetic-sha256:" + h.hexdigest()


def plan_for(cfg: RunConfig, frames, rows=None) -> ek.ExperimentPlan:
    zones = cfg.zone_specs()
    if rows is None:
        rows = (*(z.name for z in zones), "regular", "depth_aware")
    norm = "corpus" if cfg.normalization == "corpus" else dp.NormalizationSpec()
    return ek.ExperimentPlan(frames, cfg.n_train_images, cfg.resolved_hyperparams(), cfg.patch_grid(),
                             cfg.network_config(1), norm, list(zones), rows=rows,
                             validate=cfg.validate, checkpoint=cfg.checkpoint)


class RunDir:
    """Output directory carrying an INCOMPLETE marker until the command succeeds."""

    def __init__(self, path):
        self.path = Path(path)

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / INCOMPLETE).write_text("run in progress or failed\n")
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            (self.path / INCOMPLETE).unlink(missing_ok=True)
        return False


def write_manifest(out: Path, cfg: RunConfig, command: str, data_digest: str, extra: Optional[dict] = None):
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "resolved": {
            "hyperparams": vars(cfg.resolved_hyperparams()),
            "network": cfg.network_config().to_dict(),
            "geometry": vars(cfg.frame_geometry()),
            "grid": vars(cfg.patch_grid()),
            "zones": [{"name": z.name, "axial_starts": list(z.axial_starts),
                       "center_depth_cm": z.center_depth_cm, "center_error_cm": z.center_error_cm}
                      for z in cfg.zone_specs()],
        },
        "seeds": {"root": cfg.seed, "repetitions": [cfg.seed + k for k in range(cfg.n_repetitions)],
                  "split": derive_seed(cfg.seed, "split")},
        "dataset_digest": data_digest,
        "code_version": code_version(),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "profile": getattr(args, "profile", None),
        "strategy": getattr(args, "strategy", None),
        "n_train_images": getattr(args, "n_train_images", None),
        "seed": getattr(args, "seed", None),
        "n_repetitions": getattr(args, "n_repetitions", None),
        "output_dir": getattr(args, "out", None),
        "normalization": getattr(args, "normalization", None),
        "hyperparams.epochs": getattr(args, "epochs", None),
        "hyperparams.learning_rate": getattr(args, "lr", None),
    }
    if getattr(args, "container", None):
        overrides["data"] = {"source": "container", "path": args.container}
    cfg = cfg.with_overrides(**overrides)
    if getattr(args, "sequential", False):
        cfg.workers = 1
    elif getattr(args, "workers", None):
        cfg.workers = args.workers
    return cfg


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    frames = generate_dataset(args.frames_per_class, DEFAULT_PROFILES, cfg.frame_geometry(), args.data_seed)
    ingest.write_container(frames, args.output, dtype=np.float32)
    print(json.dumps({"container": str(args.output), "frames": len(frames),
                      "sha256": ingest.file_digest(args.output)}))
    return EXIT_OK


def cmd_fetch(args) -> int:
    cache = args.cache_dir or os.environ.get(CACHE_ENV) or str(Path.home() / ".cache" / "zonetrain")
    files = json.loads(Path(args.files).read_text()) if args.files else None
    manifest, transferred = ingest.fetch_dataset(args.url, cache, files, retries=args.retries)
    print(json.dumps({"cache_dir": cache, "files": len(manifest.files), "bytes_transferred": transferred}))
    return EXIT_OK


def cmd_import(args) -> int:
    layout = ingest.LayoutDescriptor.from_dict(json.loads(Path(args.layout).read_text()))
    files = []
    for item in args.file:
        path, _, label = item.rpartition(":")
        if not path:
            raise UsageError(f"--file expects PATH:LABEL, got {item!r}")
        files.append((path, int(label)))
    header = ingest.import_adapter(files, layout, args.output)
    print(json.dumps({"container": str(args.output), "frames": header.frame_count,
                      "labels": list(header.label_table)}))
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _config_from_args(args)
    geometry, grid = cfg.frame_geometry(), cfg.patch_grid()
    zones = cfg.zone_specs()
    if cfg.data["source"] == "container":
        frame = next(ingest.iter_container(cfg.data["path"]))
    else:
        frame = generate_dataset(1, DEFAULT_PROFILES, geometry, cfg.data.get("seed", 0))[0]
    regular = geo.extract_regular_grid(frame, grid)
    per_zone = {z.name: len(geo.extract_zone(frame, grid, z)) for z in zones}
    audit = {
        "axial_line_starts": geo.axial_line_starts(grid, geometry),
        "line_depths_cm": [round(geo.depth_cm_of_line(grid, geometry, i), 4) for i in range(grid.n_axial_lines)],
        "regular_patches": len(regular),
        "zone_patches": per_zone,
        "zone_centers_cm": {z.name: round(z.center_depth_cm, 4) for z in zones},
    }
    counts = sorted(set(per_zone.values()))
    per_zone_text = "/".join(map(str, counts))
    print(f"{len(regular)} regular / {per_zone_text} per zone")
    print(json.dumps(audit, indent=2))
    if args.preview:
        out = Path(args.preview)
        out.mkdir(parents=True, exist_ok=True)
        ds = dp.build_dataset([frame], grid, "regular", dp.NormalizationSpec(), depth_aware=True)
        np.savez(out / "preview.npz", patches=ds.patches, depths_norm=ds.depths_norm,
                 axial_starts=ds.axial_starts, zone_names=np.array(ds.zone_names))
        (out / "audit.json").write_text(json.dumps(audit, indent=2))
        _plot_preview(frame, grid, zones, out / "preview.png")
    return EXIT_OK


def _plot_preview(frame, grid, zones, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    env = np.abs(frame.samples)
    img = 20 * np.log10(env / env.max() + 1e-6)
    fig, ax = plt.subplots(figsize=(4, 6))
    ax.imshow(img, cmap="gray", vmin=-50, vmax=0, aspect="auto")
    colors = ["tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple"]
    for k, z in enumerate(zones):
        for a in z.axial_starts:
            for l in geo.lateral_line_starts(grid):
                ax.add_patch(Rectangle((l, a), grid.patch_lateral_px, grid.patch_axial_px, fill=False,
                                       lw=0.6, ec=colors[k % len(colors)]))
    ax.set_xlabel("lateral px")
    ax.set_ylabel("axial px")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _log_schedule(cfg: RunConfig):
    hp = cfg.resolved_hyperparams()
    msg = f"epochs={hp.epochs} lr={format_lr(hp.learning_rate)} batch={hp.batch_size}"
    log.info(msg)
    print(msg)
    return hp


def save_bundle(out: Path, bundle, cfg: RunConfig):
    # where the run was written is not part of what was trained; keep it out so
    # identical runs give identical checkpoint bytes
    config = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
    for key, model in bundle.models.items():
        meta = {"format": "zonetrain-checkpoint", "model_key": key, "strategy": bundle.strategy,
                "network": bundle.network.to_dict(), "seed": bundle.seed, "init_seed": model.init_seed,
                "config": config}
        ingest.write_checkpoint(out / f"model-{key}.ztck", named_parameters(model), meta)
    histories = {k: h.to_dict() for k, h in bundle.histories.items()}
    (out / "history.json").write_text(json.dumps(histories, indent=2, sort_keys=True))


def load_model(path) -> tuple[ZoneNet, dict]:
    params, meta = ingest.read_checkpoint(path)
    model = ZoneNet(NetworkConfig.from_dict(meta["network"]), init_seed=meta.get("init_seed"))
    load_parameters(model, params)
    model.eval()
    return model, meta


def _split_sets(cfg: RunConfig, frames):
    plan = plan_for(cfg, frames)
    split = ek.split_plan(plan, cfg.seed)
    return plan, split, ek._partition_sets(plan, split)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    _log_schedule(cfg)
    if args.dry_run:
        return EXIT_OK
    frames, digest = load_frames(cfg)
    plan, split, (train_sets, val_sets, _) = _split_sets(cfg, frames)
    with RunDir(cfg.output_dir) as out:
        bundle = ek.train_strategy(plan, cfg.strategy, train_sets, val_sets, cfg.seed)
        save_bundle(out, bundle, cfg)
        write_manifest(out, cfg, "train", digest, {
            "split": {part: {str(c): list(ids) for c, ids in p.items()}
                      for part, p in split.partitions().items()},
            "dataset_fingerprints": bundle.dataset_fingerprints,
            "models": sorted(bundle.models)})
    print(json.dumps({"run_dir": str(out), "models": sorted(bundle.models)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run_dir)
    manifest = json.loads((run / "manifest.json").read_text())
    cfg = RunConfig.from_mapping(manifest["config"])
    if args.container:
        cfg = cfg.with_overrides(data={"source": "container", "path": args.container})
    frames, _ = load_frames(cfg)
    plan, split, (_, _, test_sets) = _split_sets(cfg, frames)
    key = args.model or ("all" if "all" in manifest["models"] else args.test_zone)
    model, meta = load_model(run / f"model-{key}.ztck")
    depth_aware = model.config.input_channels == 2
    mode = "regular" if args.test_zone == ek.FULL_COLUMN else plan.zone(args.test_zone)
    cm = ek.evaluate(model, test_sets.get(mode, depth_aware))
    result = {"model": key, "test_zone": args.test_zone, "accuracy": cm.accuracy,
              "confusion": cm.counts.tolist(), "n_samples": cm.n_samples}
    print(json.dumps(result))
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_table(args) -> int:
    cfg = _config_from_args(args)
    _log_schedule(cfg)
    rows = tuple(args.rows.split(",")) if args.rows else None
    if rows:
        known = (*(z.name for z in cfg.zone_specs()), "regular", "depth_aware", ek.DISPATCH_ROW)
        unknown = [r for r in rows if r not in known]
        if unknown:
            raise ConfigError(f"unknown rows {unknown}; choose from {list(known)}")
    frames, digest = load_frames(cfg)
    plan = plan_for(cfg, frames, rows)
    plan.full_fov = args.full_fov
    with RunDir(cfg.output_dir) as out:
        result = ek.repeat_experiment(plan, cfg.n_repetitions, cfg.seed, cfg.workers)
        result.check_consistency()
        report.write_table(result, out / "table.csv")
        report.plot_table(result, out / "table.png", title=f"{cfg.n_train_images} images per class")
        runs = {f"{r}|{c}": {"accuracies": list(cell.accuracies),
                             "confusions": [cm.counts.tolist() for cm in result.confusions[(r, c)]]}
                for (r, c), cell in result.cells.items()}
        (out / "runs.json").write_text(json.dumps(runs, indent=2))
        write_manifest(out, cfg, "table", digest, {"config_hash": plan.config_hash()})
    print(report.format_grid(result))
    return EXIT_OK


def _curve_command(args, name: str, run) -> int:
    cfg = _config_from_args(args)
    _log_schedule(cfg)
    frames, digest = load_frames(cfg)
    plan = plan_for(cfg, frames)
    with RunDir(cfg.output_dir) as out:
        curve = run(cfg, plan)
        report.write_curve(curve, out / f"{name}.csv")
        report.plot_curves([curve], out / f"{name}.png", title=name)
        write_manifest(out, cfg, name, digest, {"config_hash": plan.config_hash(),
                                                "omitted": list(curve.omitted)})
    for x, y, e in zip(curve.x, curve.y, curve.yerr):
        print(f"{x:+.3f}\t{100 * y:.2f}\t{100 * e:.2f}")
    return EXIT_OK


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def cmd_sweep_offset(args) -> int:
    offsets = _floats(args.offsets) if args.offsets else ek.default_offsets()
    return _curve_command(args, "sweep_offset", lambda cfg, plan: ek.repeat_offset_sweep(
        plan, args.zone, offsets, cfg.n_repetitions, cfg.seed, args.snap, cfg.workers))


def cmd_sweep_center(args) -> int:
    centers = _floats(args.centers)
    return _curve_command(args, "sweep_center", lambda cfg, plan: ek.sweep_zone_center(
        plan, centers, args.width, cfg.n_repetitions, cfg.seed, args.snap, cfg.workers))


def cmd_width(args) -> int:
    widths = [int(w) for w in args.widths.split(",")]
    return _curve_command(args, "zone_width", lambda cfg, plan: ek.zone_width_experiment(
        plan, widths, cfg.n_repetitions, cfg.seed, cfg.workers))


def cmd_report(args) -> int:
    src = Path(args.input)
    out = Path(args.out) if args.out else (src if src.is_dir() else src.parent)
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(src.glob("*.csv")) if src.is_dir() else [src]
    if not files:
        raise DataError(f"no result files in {src}")
    for f in files:
        with open(f) as fh:
            body = [line for line in fh if not line.startswith("#")]
        header = body[0] if body else ""
        if header.startswith("strategy,"):
            result = report.result_from_table(report.read_table(f))
            print(report.format_grid(result))
            report.plot_table(result, out / f"{f.stem}.png")
        elif header.startswith("curve,"):
            curves = report.read_curves(f)
            report.plot_curves(curves, out / f"{f.stem}.png")
            for c in curves:
                print(c.name, " ".join(f"{x:+.2f}:{100 * y:.2f}" for x, y in zip(c.x, c.y)))
        else:
            raise DataError(f"{f} is neither a result table nor a curve file")
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = _config_from_args(args)
    trace = shape_trace(cfg.network_config(args.channels))
    print(trace.format())
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _common(p, data=True):
    p.add_argument("--config", help="JSON or YAML run config")
    p.add_argument("--profile", choices=("paper", "desk"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    if data:
        p.add_argument("--container", help="read frames from this container instead of synthesizing")


def _run_opts(p):
    p.add_argument("--strategy", choices=("regular", "zone", "depth_aware"))
    p.add_argument("--n-train-images", type=int)
    p.add_argument("--n-repetitions", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--normalization", choices=("per_patch", "corpus"))
    p.add_argument("--workers", type=int)
    p.add_argument("--sequential", action="store_true", help="force single-process execution")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zonetrain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic frame container")
    _common(p, data=False)
    p.add_argument("--frames-per-class", type=int, required=True)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fetch", help="download the public dataset into the cache")
    p.add_argument("--url", default=ingest.OSF_PROJECT_URL)
    p.add_argument("--cache-dir", help=f"defaults to ${CACHE_ENV} or ~/.cache/zonetrain")
    p.add_argument("--files", help="JSON list of {name, url, sha256}")
    p.add_argument("--retries", type=int, default=3)
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("import", help="convert raw frame dumps into a container")
    p.add_argument("--layout", required=True, help="JSON layout descriptor")
    p.add_argument("--file", action="append", required=True, metavar="PATH:LABEL")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("extract", help="patch-count and zone audit for one frame")
    _common(p)
    p.add_argument("--preview", help="directory for preview.npz / preview.png")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train one strategy")
    _common(p)
    _run_opts(p)
    p.add_argument("--dry-run", action="store_true", help="validate and print the schedule only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on its test split")
    p.add_argument("run_dir")
    p.add_argument("--test-zone", default="on_focus", help="zone name or 'full'")
    p.add_argument("--model", help="model key inside the run (zone name or 'all')")
    p.add_argument("--container")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("table", help="strategy x test-zone grid over repetitions")
    _common(p)
    _run_opts(p)
    p.add_argument("--rows", help="comma-separated rows (default: 3 zones, regular, depth_aware)")
    p.add_argument("--full-fov", action="store_true", help="add a full field-of-view test column")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("sweep-offset", help="shift the test zone around a fixed training zone")
    _common(p)
    _run_opts(p)
    p.add_argument("--zone", default="on_focus")
    p.add_argument("--offsets", help="comma-separated cm offsets, e.g. --offsets=-0.4,0,0.4 (default -0.8..0.8 step 0.2)")
    p.add_argument("--snap", choices=("pixel", "lattice"), default="pixel")
    p.set_defaults(func=cmd_sweep_offset)

    p = sub.add_parser("sweep-center", help="train and test on zones at several centres")
    _common(p)
    _run_opts(p)
    p.add_argument("--centers", default="1.2,1.4,1.6,1.8,2.0,2.2,2.4,2.6,2.8")
    p.add_argument("--width", type=int, default=3)
    p.add_argument("--snap", choices=("pixel", "lattice"), default="pixel")
    p.set_defaults(func=cmd_sweep_center)

    p = sub.add_parser("width", help="accuracy versus axial zone width")
    _common(p)
    _run_opts(p)
    p.add_argument("--widths", default="3,6,9")
    p.set_defaults(func=cmd_width)

    p = sub.add_parser("report", help="render stored tables/curves to text and figures")
    p.add_argument("input", help="result directory or a single csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("trace", help="print the network shape trace")
    _common(p, data=False)
    p.add_argument("--channels", type=int, choices=(1, 2), default=1)
    p.set_defaults(func=cmd_trace)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, exc)
    except (DataError, OSError) as exc:
        return _fail(EXIT_DATA, exc)
    except (ComputeError, ZoneTrainError) as exc:
        return _fail(EXIT_COMPUTE, exc)


if __name__ == "__main__":
    sys.exit(main())
