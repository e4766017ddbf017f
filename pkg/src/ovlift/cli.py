"""Command line entry point: ``ovlift run | eval | synth | export-ply``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backends import BackendError, RecordingBackend
from .config import KEYS, ConfigError, PipelineConfig, load_config
from .evaluation import GTRecord, PredictionRecord, evaluate
from .ply import write_ply
from .scene_io import GroundTruth, SceneLoadError, assign_instances_from_boxes, load_boxes, load_scene, save_scene
from .synthbench import OracleBackend, generate_scene, load_spec, make_spec

logger = logging.getLogger("ovlift")


class SchemaError(ValueError):
    pass


def load_predictions(pred_dir):
    """Prediction records from ``instances.json`` + ``instance_ids.txt``."""
    pred_dir = Path(pred_dir)
    inst_path, ids_path = pred_dir / "instances.json", pred_dir / "instance_ids.txt"
    if not inst_path.is_file() and not ids_path.is_file():
        return []
    try:
        instances = json.loads(inst_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read {inst_path}: {exc}") from exc
    if not isinstance(instances, list):
        raise SchemaError(f"{inst_path}: expected a JSON array of instances")
    ids = np.loadtxt(ids_path, dtype=np.int64, ndmin=1) if ids_path.is_file() else None
    if ids is None:
        raise SchemaError(f"missing {ids_path}")
    preds = []
    for k, inst in enumerate(instances):
        for key in ("id", "label", "confidence"):
            if key not in inst:
                raise SchemaError(f"{inst_path}: instance {k} lacks field {key!r}")
        idx = np.flatnonzero(ids == int(inst["id"]))
        if len(idx) == 0:
            continue
        conf = inst["confidence"]
        preds.append(PredictionRecord(idx, inst["label"], float(conf) if conf is not None else 0.0))
    return preds


def gt_records(gt: GroundTruth):
    return [GTRecord(idx, label) for _, idx, label in gt.instances()]


def run_eval(pred_dir, gt: GroundTruth, groups=None, out_path=None):
    preds = load_predictions(pred_dir)
    report = evaluate(preds, gt_records(gt), groups if groups is not None else gt.category_group)
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report.to_dict(), indent=2))
    return report


def _add_config_flags(parser, skip=()):
    for key, attr in KEYS.items():
        if key == "debug" or key in skip:
            continue
        default = PipelineConfig.__dataclass_fields__[attr].default
        parser.add_argument(f"--{key}", dest=f"cfg::{key}", default=None, metavar="VALUE",
                            help=f"config key {key} (default: {default})")
    parser.add_argument("--debug", dest="cfg::debug", action="store_const", const=True, default=None,
                        help="also write superpoints, score table and coarse masks")


def cmd_run(args):
    overrides = {k.split("::", 1)[1]: v for k, v in vars(args).items() if k.startswith("cfg::")}
    config = load_config(args.config, overrides)
    from .pipeline import run_pipeline

    result = run_pipeline(config)
    s = result.summary
    print(f"{s['num_instances']} instances ({s['num_labeled_instances']} labeled) from "
          f"{s['num_prompts']} prompts; outputs in {config.output}")
    if s.get("warnings"):
        for w in s["warnings"]:
            logger.warning(w)
    return 0


def _load_gt(args):
    if args.gt:
        return GroundTruth.load(args.gt)
    if args.boxes:
        if not args.scene:
            raise SchemaError("--boxes needs --scene to know the points")
        scene = load_scene(args.scene)
        return assign_instances_from_boxes(scene.points, load_boxes(args.boxes), args.min_points)
    raise SchemaError("give --gt DIR or --boxes FILE --scene DIR")


def cmd_eval(args):
    gt = _load_gt(args)
    groups = json.loads(Path(args.groups).read_text()) if args.groups else None
    out = args.out or Path(args.pred) / "metrics.json"
    report = run_eval(args.pred, gt, groups, out)
    print(report.to_table())
    return 0


def cmd_synth(args):
    if args.spec:
        spec = load_spec(args.spec)
    else:
        spec = make_spec(num_objects=args.objects, total_points=args.points, num_frames=args.frames,
                         embedding_dim=args.dim, seed=args.seed)
    scene, gt = generate_scene(spec, seed=args.seed)
    out = Path(args.out)
    save_scene(scene, out)
    gt.save(out)
    (out / "scene_spec.json").write_text(json.dumps(spec.to_dict(), indent=1))
    print(f"wrote scene with {scene.num_points} points, {len(scene.frames)} frames to {out}")
    if args.fixtures:
        from .pipeline import run_pipeline

        # Record through the on-disk scene so fixtures match what `run` will load.
        disk_scene = load_scene(out)
        recorder = RecordingBackend(OracleBackend(disk_scene, gt, spec, seed=args.seed))
        overrides = {k.split("::", 1)[1]: v for k, v in vars(args).items() if k.startswith("cfg::")}
        config = load_config(args.config, overrides)
        run_pipeline(config, scene=disk_scene, backend=recorder, write=False)
        vocab = sorted({t for tags in recorder.tags.values() for t in tags})
        recorder.record_texts([t.casefold() for t in vocab])
        recorder.save(args.fixtures)
        print(f"recorded fixtures to {args.fixtures}")
    return 0


def cmd_export_ply(args):
    scene = load_scene(args.scene)
    ids = np.loadtxt(Path(args.pred) / "instance_ids.txt", dtype=np.int64, ndmin=1)
    if len(ids) != scene.num_points:
        raise SchemaError(f"instance_ids.txt has {len(ids)} rows, scene has {scene.num_points} points")
    rng = np.random.default_rng(args.seed)
    palette = rng.integers(40, 256, size=(max(int(ids.max()) + 1, 1), 3), dtype=np.uint8)
    colors = np.full((len(ids), 3), 128, dtype=np.uint8)
    fg = ids >= 0
    colors[fg] = palette[ids[fg]]
    write_ply(args.out, scene.points, colors)
    print(f"wrote {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="ovlift", description="Training-free open-vocabulary 3D instance lifting")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the pipeline on a scene")
    p.add_argument("--config", help="TOML config file (flat dotted keys)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="run output directory")
    p.add_argument("--gt", help="directory with gt_instance_ids.txt and gt_labels.json")
    p.add_argument("--boxes", help="GT boxes JSON (instances assigned from boxes)")
    p.add_argument("--scene", help="scene directory, required with --boxes")
    p.add_argument("--min-points", type=int, default=20, help="drop boxes with fewer points")
    p.add_argument("--groups", help="JSON map label -> group")
    p.add_argument("--out", help="metrics JSON path (default: PRED/metrics.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic scene (and optional recorded fixtures)")
    p.add_argument("out", help="output scene directory")
    p.add_argument("--spec", help="SceneSpec JSON; default: a generated ring of objects")
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--points", type=int, default=50_000)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--dim", type=int, default=768, help="embedding dimension")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fixtures", help="record oracle backend answers into this fixture store")
    p.add_argument("--config", help="pipeline config used while recording fixtures")
    _add_config_flags(p, skip=("seed",))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-ply", help="colour points by predicted instance")
    p.add_argument("--pred", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export_ply)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, SceneLoadError, BackendError, ValueError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
