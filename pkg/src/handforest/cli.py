"""Command line: dataset generation, training, estimation, evaluation, benchmarks.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model error.
Option precedence: command-line flags, then ``--config`` (``key=value``
lines), then built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import metrics, synth, workflows
from .cloud import CameraIntrinsics, DepthFormatError, EmptyFrame
from .forest import EmptyTrainingSet, ForestParams
from .modelio import ModelFormatError, load_model, save_model
from .normals import NormalForest, NormalForestParams
from .pipeline import ModelBundle, NoEdgePoints, NoValidPoints, PipelineConfig

log = logging.getLogger("handforest")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class ModelError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


# (flag, type, default, help); required flags have default None and are checked later
COMMANDS = {
    "synth-gen": (
        "render a synthetic dataset",
        [("--count", _positive_int, None, "number of frames"),
         ("--seed", int, 0, "dataset seed"),
         ("--out", str, None, "output directory"),
         ("--yaw-range", _nonneg_float, 60.0, "yaw sampled in [-DEG, DEG]"),
         ("--pitch-range", _nonneg_float, 45.0, "pitch sampled in [-DEG, DEG]"),
         ("--roll-range", _nonneg_float, 180.0, "roll sampled in [-DEG, DEG]"),
         ("--noise-mm", _nonneg_float, 0.0, "Gaussian depth jitter (mm)")]),
    "train-normals": (
        "train the normal forest",
        [("--data", str, None, "dataset directory"),
         ("--out", str, None, "model file"),
         ("--trees", _positive_int, 1, "number of trees"),
         ("--depth", _positive_int, 20, "maximum depth"),
         ("--layer-split", int, 10, "depth where splits switch from polar to azimuth"),
         ("--points-per-frame", _positive_int, 200, "training points drawn per frame"),
         ("--seed", int, 0, "training seed")]),
    "train-pose": (
        "train the pose cascade",
        [("--data", str, None, "dataset directory"),
         ("--normal-model", str, None, "normal forest file"),
         ("--out", str, None, "bundle directory"),
         ("--feature", str, "normal", "feature kind: normal or depth"),
         ("--trees", _positive_int, 5, "trees per stage"),
         ("--depth", _positive_int, 20, "maximum depth"),
         ("--offset-range", _nonneg_float, 60.0, "probe offset range (mm)"),
         ("--seed", int, 0, "training seed")]),
    "estimate": (
        "estimate poses for a dataset",
        [("--bundle", str, None, "bundle directory"),
         ("--input", str, None, "dataset directory"),
         ("--out", str, None, "pose file"),
         ("--points-per-stage", _positive_int, 256, "input points per stage"),
         ("--seed", int, 0, "subsampling seed")]),
    "evaluate": (
        "score a pose file against a manifest",
        [("--pred", str, None, "pose file"),
         ("--gt", str, None, "manifest file or dataset directory"),
         ("--out", str, None, "report directory"),
         ("--thresholds", str, "10:80:2.5", "success thresholds LO:HI:STEP (mm)"),
         ("--bin-deg", float, 15.0, "viewpoint bin width (deg)"),
         ("--svg", bool, False, "also write SVG figures")]),
    "bench-normals": (
        "time and score eigen vs forest normals",
        [("--data", str, None, "dataset directory"),
         ("--normal-model", str, None, "normal forest file"),
         ("--out", str, None, "table file"),
         ("--repeats", _positive_int, 3, "timing repeats per frame (best is kept)")]),
}
REQUIRED = {"synth-gen": ("count", "out"), "train-normals": ("data", "out"),
            "train-pose": ("data", "normal_model", "out"),
            "estimate": ("bundle", "input", "out"), "evaluate": ("pred", "gt", "out"),
            "bench-normals": ("data", "normal_model", "out")}


def build_parser():
    p = _Parser(prog="handforest", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value option file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, (helptext, opts) in COMMANDS.items():
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", dest="sub_config", help="key=value option file")
        for flag, typ, default, h in opts:
            if typ is bool:
                sp.add_argument(flag, action="store_const", const=True, default=None, help=h)
            else:
                sp.add_argument(flag, type=typ, default=None,
                                help=h + ("" if default is None else f" (default {default})"))
    return p


def read_config(path):
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.lstrip("-").replace("-", "_")] = v
    return out


def resolve(args):
    """Fill unset options from the config file, then from defaults."""
    cfg = {}
    for path in (args.config, args.sub_config):
        if path:
            cfg.update(read_config(path))
    for flag, typ, default, _ in COMMANDS[args.command][1]:
        dest = flag.lstrip("-").replace("-", "_")
        if getattr(args, dest) is not None:
            continue
        if dest in cfg:
            raw = cfg[dest]
            try:
                val = (raw.lower() in ("1", "true", "yes", "on")) if typ is bool else typ(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config value for {dest}: {exc}") from None
        else:
            val = default
        setattr(args, dest, val)
    missing = [d for d in REQUIRED[args.command] if getattr(args, d) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def _load_items(path):
    path = Path(path)
    if not (path / synth.MANIFEST_NAME).exists():
        raise DataError(f"{path}: no {synth.MANIFEST_NAME} found")
    items = workflows.load_clouds(path)
    if not items:
        raise DataError(f"{path}: dataset is empty")
    return items


def _load_normal_forest(path):
    try:
        model = load_model(path)
    except OSError as exc:
        raise ModelError(f"cannot read normal model: {exc}") from None
    if not isinstance(model, NormalForest):
        raise ModelError(f"{path} is not a normal forest")
    return model


def cmd_synth_gen(a):
    cfg = synth.SamplerConfig(yaw_range_deg=a.yaw_range, pitch_range_deg=a.pitch_range,
                              roll_range_deg=a.roll_range, noise_mm=a.noise_mm)
    recs = synth.generate_dataset(a.count, a.seed, a.out, CameraIntrinsics.default(), cfg)
    print(f"wrote {len(recs)} frames to {a.out}")


def cmd_train_normals(a):
    items = _load_items(a.data)
    params = NormalForestParams(n_trees=a.trees, max_depth=a.depth, layer_split=a.layer_split,
                                points_per_frame=a.points_per_frame, seed=a.seed)
    forest = workflows.train_normals(items, params)
    save_model(forest, a.out)
    print(f"trained {a.trees} normal tree(s) on {len(items)} frames -> {a.out}")


def cmd_train_pose(a):
    try:
        kind = {"normal": "normal", "depth": "depth"}[a.feature]
    except KeyError:
        raise UsageError("--feature must be 'normal' or 'depth'") from None
    forest = _load_normal_forest(a.normal_model)
    items = _load_items(a.data)
    params = ForestParams(n_trees=a.trees, max_depth=a.depth, seed=a.seed)
    config = PipelineConfig(kind=kind, wrist_kind=kind, offset_range_mm=a.offset_range)
    bundle = workflows.train_pose(items, forest, params, config)
    bundle.save(a.out)
    print(f"trained {len(bundle.stages)} stages on {len(items)} frames -> {a.out}")


def cmd_estimate(a):
    try:
        bundle = ModelBundle.load(a.bundle)
    except (OSError, KeyError, ValueError) as exc:
        raise ModelError(f"cannot load bundle: {exc}") from None
    items = _load_items(a.input)
    results = workflows.estimate_all(items, bundle, points_per_stage=a.points_per_stage,
                                     seed=a.seed)
    workflows.write_poses(a.out, results)
    total = np.mean([est.timings_ms["total"] for _, est in results])
    print(f"estimated {len(results)} frames, {total:.1f} ms/frame -> {a.out}")


def cmd_evaluate(a):
    try:
        thresholds = metrics.parse_thresholds(a.thresholds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ids, pred, _ = workflows.read_poses(a.pred)
    gt_path = Path(a.gt)
    records = {r.frame_id: r for r in synth.read_manifest(gt_path)}
    missing = [i for i in ids if i not in records]
    if missing:
        raise DataError(f"{len(missing)} predicted frame(s) not in the manifest, e.g. {missing[0]}")
    gt = [records[i].pose for i in ids]
    params = [records[i].params for i in ids]
    report = metrics.build_report(pred, gt, params, thresholds,
                                  workflows.read_timings(a.pred), a.bin_deg)
    metrics.write_report(report, a.out, svg=a.svg)
    print(f"mean joint error {report.mean_error_mm:.2f} mm over {report.n_frames} frames "
          f"-> {a.out}")


def cmd_bench_normals(a):
    forest = _load_normal_forest(a.normal_model)
    items = _load_items(a.data)
    rows = metrics.bench_normals([(it.record.frame_id, it.cloud) for it in items], forest,
                                 [workflows.normal_targets(it) for it in items], a.repeats)
    metrics.write_bench_table(rows, a.out)
    pca = np.mean([r.pca_ms for r in rows])
    fst = np.mean([r.forest_ms for r in rows])
    print(f"eigen {pca:.2f} ms, forest {fst:.2f} ms, speedup {pca / fst:.2f}x -> {a.out}")


HANDLERS = {"synth-gen": cmd_synth_gen, "train-normals": cmd_train_normals,
            "train-pose": cmd_train_pose, "estimate": cmd_estimate, "evaluate": cmd_evaluate,
            "bench-normals": cmd_bench_normals}

DATA_ERRORS = (DataError, DepthFormatError, EmptyFrame, NoEdgePoints, NoValidPoints,
               EmptyTrainingSet, metrics.LengthMismatch, synth.OutOfFrustum)
MODEL_ERRORS = (ModelError, ModelFormatError)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args = resolve(args)
        HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MODEL_ERRORS as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        # unreadable or malformed inputs
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def options_dict(args):
    """Resolved options as a plain dict (for logging and tests)."""
    d = dict(vars(args))
    d.pop("sub_config", None)
    return d


if __name__ == "__main__":
    sys.exit(main())
