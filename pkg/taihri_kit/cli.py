"""The taihri-kit command line.

Exit codes: 0 on success, 1 on a domain error (its class name is printed
to stderr), 2 on a usage error. Primary outputs are written atomically and
come with a `<output>.manifest.json` run manifest; `--manifest` moves it,
runs without an output file log it at debug level.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Sequence

from . import __version__
from .align import (
    ANCHORS_FILE_FIELDS,
    AnchorCorrespondence,
    align_with_anchors,
    anchor_residuals,
    apply_transform,
)
from .camera import (
    DEFAULT_INTRINSICS,
    INTRINSICS_FIELDS,
    CameraIntrinsics,
    Point3Cam,
    project,
)
from .codec import (
    DEFAULT_VOLUME,
    VOLUME_FIELDS,
    InteractionVolume,
    PredictionRecord,
    decode_voxel,
    encode_voxel,
    parse_sequence,
)
from .evaluate import (
    SAMPLE_RECORD_FIELDS,
    EvalSample,
    PredictionTable,
    codec_round_trip_predictor,
    depth_baseline_predictor,
    gt_surface_depth,
    identity_predictor,
    part_config,
    run_benchmark,
)
from .grpo import (
    GRPO_FIELDS,
    TASK_FIELDS,
    GrpoConfig,
    SyntheticLocalizationTask,
    train_toy,
)
from .joints import KeypointSet
from .reward import (
    DEFAULT_REWARD_3D,
    REWARD_FIELDS,
    JointErrors,
    RewardConfig,
    aggregate_error,
    pck,
    pose_reward,
)
from .synth import SYNTH_FIELDS, SynthConfig, generate_dataset
from .utils import (
    ConfigError,
    KitError,
    check_fields,
    check_types,
    exact_mean,
    load_json_config,
    parse_triple,
    read_jsonl,
    write_json,
    write_jsonl,
    write_text,
)

logger = logging.getLogger(__name__)

PREDICTORS: Dict[str, Callable[[], Callable]] = {
    "identity": lambda: identity_predictor,
    "codec": codec_round_trip_predictor,
    "depth-baseline": lambda: depth_baseline_predictor(gt_surface_depth()),
}
LOG_FORMAT = "[%(asctime)s] %(levelname)-7s %(name)s: %(message)s"

_handler: logging.Handler | None = None


@dataclass
class RunManifest:
    """What a run did, enough to reproduce its primary output"""

    subcommand: str
    config: Dict[str, Any] = field(default_factory=dict)
    seed: int | None = None
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    version: str = __version__
    duration_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": self.version,
            "duration_s": self.duration_s,
        }

    def write(self, path: str | Path) -> Path:
        write_json(path, self.to_dict())
        return Path(path)


def _int_triple(text: str) -> tuple:
    return parse_triple(text, cast=int)


def _load_intrinsics(path: str | None) -> CameraIntrinsics:
    if path is None:
        return DEFAULT_INTRINSICS
    return CameraIntrinsics.from_dict(
        load_json_config(path, INTRINSICS_FIELDS, INTRINSICS_FIELDS)
    )


def _load_volume(path: str | None) -> InteractionVolume:
    if path is None:
        return DEFAULT_VOLUME
    return InteractionVolume.from_dict(
        load_json_config(path, VOLUME_FIELDS, VOLUME_FIELDS)
    )


def _emit(text: str, out: str | None) -> None:
    print(text)
    if out:
        write_text(out, text + "\n")


def _cmd_encode(args: argparse.Namespace, manifest: RunManifest) -> str | None:
    vol = _load_volume(args.volume)
    point = Point3Cam(*args.point)
    token = encode_voxel(point, vol, clamp=args.clamp)
    manifest.config = {"volume": vol.to_dict(), "clamp": args.clamp}
    if args.joint:
        k = _load_intrinsics(args.intrinsics)
        manifest.config["intrinsics"] = k.to_dict()
        record = PredictionRecord.from_pixel(args.joint, project(point, k), token)
        _emit(str(record), args.out)
    else:
        _emit(f"{token.X},{token.Y},{token.Z}", args.out)
    return args.out


def _cmd_decode(args: argparse.Namespace, manifest: RunManifest) -> str | None:
    vol = _load_volume(args.volume)
    point = decode_voxel(tuple(args.token), vol)
    manifest.config = {"volume": vol.to_dict()}
    text = f"x={point.x:.3f},y={point.y:.3f},z={point.z:.3f} mm"
    if args.intrinsics:
        if point.z > 0:
            u, v = project(point, _load_intrinsics(args.intrinsics))
            text += f"\nu={u:.3f},v={v:.3f} px"
        else:
            logger.warning("Voxel center is behind the camera, no pixel")
    _emit(text, args.out)
    return args.out


def _cmd_parse(args: argparse.Namespace, manifest: RunManifest) -> str | None:
    if args.input == "-":
        raw = sys.stdin.buffer.read()
    else:
        raw = Path(args.input).read_bytes()
        manifest.inputs["input"] = args.input
    k = _load_intrinsics(args.intrinsics)
    vol = _load_volume(args.volume)
    manifest.config = {"intrinsics": k.to_dict(), "volume": vol.to_dict()}

    seq, diagnostics = parse_sequence(raw)
    keypoints = seq.to_keypoints(vol)
    records = [
        {
            "name": record.joint_name,
            "pixel": list(record.pixel),
            "voxel": list(record.voxel),
            "xyz_mm": [float(v) for v in keypoints[record.joint_name]],
            "in_frame": record.in_frame(k),
        }
        for record in seq
    ]
    for diag in diagnostics:
        logger.warning("line %d: %s", diag.line, diag.reason)
    result = {
        "records": records,
        "diagnostics": [diag.to_dict() for diag in diagnostics],
    }
    write_json(args.out, result)
    logger.info(
        "Parsed %d record(s), %d diagnostic(s)", len(records), len(diagnostics)
    )
    return args.out


def _cmd_reward(args: argparse.Namespace, manifest: RunManifest) -> str | None:
    preds = PredictionTable.from_records(read_jsonl(args.pred))
    gts = PredictionTable.from_records(read_jsonl(args.gt))
    if not gts.by_id:
        raise ConfigError(f"\nNo ground-truth record in {args.gt}")
    preds.check_ids(gts.by_id)
    cfg = (
        RewardConfig.from_dict(
            load_json_config(args.config, REWARD_FIELDS, REWARD_FIELDS)
        )
        if args.config
        else DEFAULT_REWARD_3D
    )
    manifest.inputs.update(pred=args.pred, gt=args.gt)
    manifest.config = cfg.to_dict()

    rows = []
    for sample_id, gt in gts.by_id.items():
        errs = JointErrors.between(preds.by_id[sample_id], gt)
        rows.append(
            {
                "id": sample_id,
                "reward": pose_reward(errs, cfg),
                "aggregate_error": aggregate_error(errs, cfg.delta),
                "pck": pck(errs, cfg.kappa),
            }
        )
    mean_reward = exact_mean(row["reward"] for row in rows)
    print(repr(mean_reward))
    if args.out:
        write_json(args.out, {"mean_reward": mean_reward, "samples": rows})
    return args.out


def _cmd_grpo_train(args: argparse.Namespace, manifest: RunManifest) -> str | None:
    task_data = load_json_config(args.task, TASK_FIELDS) if args.task else {}
    task = SyntheticLocalizationTask.from_dict(task_data)
    cfg_data = dict(load_json_config(args.config, GRPO_FIELDS)) if args.config else {}
    if args.seed is not None:
        cfg_data["seed"] = args.seed
    cfg = GrpoConfig.from_dict(cfg_data)
    manifest.config = {"task": dict(task_data), "grpo": cfg.to_dict()}
    manifest.seed = cfg.seed

    curve = train_toy(task, cfg)
    curve.write_csv(args.curve)
    if len(curve):
        first, last = curve.quartile_means()
        logger.info(
            "Mean reward: first quarter %.4f, last quarter %.4f", first, last
        )
    return args.curve


def _cmd_synth(args: argparse.Namespace, manifest: RunManifest) -> str | None:
    data = dict(load_json_config(args.config, SYNTH_FIELDS)) if args.config else {}
    if args.intrinsics:
        data["intrinsics"] = _load_intrinsics(args.intrinsics).to_dict()
    cfg = SynthConfig.from_dict(data)
    manifest.config = cfg.to_dict()
    manifest.seed = args.seed

    samples, stats = generate_dataset(args.n, cfg, seed=args.seed)
    write_jsonl(args.out, (sample.to_record() for sample in samples))
    manifest.config["acceptance"] = stats.to_dict()
    return args.out


def _cmd_eval(args: argparse.Namespace, manifest: RunManifest) -> str | None:
    camera = _load_intrinsics(args.intrinsics) if args.intrinsics else None
    samples = [
        EvalSample.from_record(r, camera) for r in read_jsonl(args.data)
    ]
    manifest.inputs["data"] = args.data
    if args.pred:
        predictor = PredictionTable.from_records(read_jsonl(args.pred))
        predictor.check_ids(s.sample_id for s in samples)
        manifest.inputs["pred"] = args.pred
    else:
        predictor = PREDICTORS[args.predictor]()
    configs = [part_config(key) for key in args.configs.split(",") if key]
    manifest.config = {
        "configs": [config.name for config in configs],
        "predictor": None if args.pred else args.predictor,
    }

    report = run_benchmark(samples, predictor, configs)
    write_json(args.report, report.to_dict())
    if args.markdown:
        write_text(args.markdown, report.to_markdown())
        manifest.outputs["markdown"] = args.markdown
    return args.report


def _cmd_align(args: argparse.Namespace, manifest: RunManifest) -> str | None:
    data = load_json_config(args.anchors, ANCHORS_FILE_FIELDS, ("anchors",))
    corr = AnchorCorrespondence.from_records(data["anchors"])
    check_types(data, {"with_scale": "boolean"}, "anchors file")
    with_scale = data.get("with_scale", False)
    transform = align_with_anchors(corr, with_scale=with_scale)
    residuals = anchor_residuals(transform, corr)
    logger.info(
        "Aligned with %d anchor(s), max residual %.6f mm",
        len(corr),
        float(residuals.max()),
    )
    manifest.inputs.update(anchors=args.anchors, pose=args.pose)
    manifest.config = {
        "anchors": list(corr.names),
        "with_scale": with_scale,
        "transform": transform.to_dict(),
    }

    out = []
    for record in read_jsonl(args.pose):
        check_fields(record, SAMPLE_RECORD_FIELDS, ("joints",), "pose record")
        aligned = apply_transform(
            transform, KeypointSet.from_records(record["joints"])
        )
        out.append({**record, "joints": aligned.to_records()})
    write_jsonl(args.out, out)
    return args.out


def _cmd_version(args: argparse.Namespace, manifest: RunManifest) -> str | None:
    _emit(__version__, args.out)
    return args.out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taihri-kit",
        description="Camera-frame human keypoint tooling for close-range "
        "interaction: voxel token codec, pose reward, toy GRPO, scene "
        "synthesis, G-MPJPE evaluation and anchor alignment.",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        help="Log debug messages",
    )
    parser.add_argument(
        "--manifest",
        help="Write the run manifest here instead of next to the output",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name: str, func: Callable, help: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=help, description=help)
        cmd.set_defaults(func=func)
        cmd.add_argument(
            "--intrinsics",
            help="Camera intrinsics JSON file, recorded in the manifest",
        )
        return cmd

    cmd = add("encode", _cmd_encode, "Encode a camera-frame point to a token")
    cmd.add_argument("--point", type=parse_triple, required=True,
                     help="x,y,z in mm")
    cmd.add_argument("--joint", help="Print a full record for this joint")
    cmd.add_argument("--volume", help="Interaction volume JSON file")
    cmd.add_argument("--clamp", action="store_true",
                     help="Clamp out-of-volume points to the border cells")
    cmd.add_argument("--out", help="Also write the result to this file")

    cmd = add("decode", _cmd_decode, "Decode a voxel token to millimeters")
    cmd.add_argument("--token", type=_int_triple, required=True, help="X,Y,Z")
    cmd.add_argument("--volume", help="Interaction volume JSON file")
    cmd.add_argument("--out", help="Also write the result to this file")

    cmd = add("parse", _cmd_parse, "Parse a prediction sequence")
    cmd.add_argument("--in", "--input", dest="input", default="-",
                     help="Text file, - for stdin")
    cmd.add_argument("--volume", help="Interaction volume JSON file")
    cmd.add_argument("--report", "--out", dest="out", required=True,
                     help="Records and diagnostics JSON file")

    cmd = add("reward", _cmd_reward, "Pose reward of predicted joints")
    cmd.add_argument("--pred", required=True, help="Predictions JSONL file")
    cmd.add_argument("--gt", required=True, help="Ground-truth JSONL file")
    cmd.add_argument("--config", help="Reward config JSON file")
    cmd.add_argument("--out", help="Output JSON file")

    cmd = add("grpo-train", _cmd_grpo_train, "Train the toy policy with GRPO")
    cmd.add_argument("--task", help="Toy task JSON file")
    cmd.add_argument("--config", help="GRPO config JSON file")
    cmd.add_argument("--seed", type=int, help="Override the config seed")
    cmd.add_argument("--curve", required=True, help="Learning curve CSV")

    cmd = add("synth", _cmd_synth, "Generate a synthetic dataset")
    cmd.add_argument("--n", type=int, required=True, help="Number of samples")
    cmd.add_argument("--config", help="Synthesis config JSON file")
    cmd.add_argument("--seed", type=int, default=0, help="Master seed")
    cmd.add_argument("--out", required=True, help="Output JSONL file")

    cmd = add("eval", _cmd_eval, "G-MPJPE of predictions on a dataset")
    cmd.add_argument("--data", required=True, help="Dataset JSONL file")
    cmd.add_argument("--pred", help="Predictions JSONL file")
    cmd.add_argument("--predictor", choices=list(PREDICTORS),
                     default="identity",
                     help="Built-in predictor when --pred is not given")
    cmd.add_argument("--configs", default="upper,lower,l_upper,r_upper",
                     help="Comma-separated part configs")
    cmd.add_argument("--report", required=True, help="Report JSON file")
    cmd.add_argument("--markdown", help="Also render the report as markdown")

    cmd = add("align", _cmd_align, "Place poses in the camera frame")
    cmd.add_argument("--anchors", required=True, help="Anchors JSON file")
    cmd.add_argument("--pose", required=True, help="Root-relative poses JSONL")
    cmd.add_argument("--out", required=True, help="Output JSONL file")

    cmd = add("version", _cmd_version, "Print the version")
    cmd.add_argument("--out", help="Also write the version to this file")

    return parser


def setup_logging(verbose: bool = False) -> None:
    """Install one stderr handler on the package logger"""
    global _handler
    root = logging.getLogger("taihri_kit")
    if _handler is not None:
        root.removeHandler(_handler)
    _handler = logging.StreamHandler(sys.stderr)
    _handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(_handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand and return the exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    setup_logging(args.verbose)
    manifest = RunManifest(subcommand=args.command)
    start = time.perf_counter()
    try:
        camera = _load_intrinsics(args.intrinsics) if args.intrinsics else None
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            primary = args.func(args, manifest)
        for warning in caught:
            logger.warning("%s: %s", warning.category.__name__, warning.message)

        if camera is not None:
            manifest.config.setdefault("intrinsics", camera.to_dict())
        if primary:
            manifest.outputs.setdefault("primary", str(primary))
        manifest.duration_s = time.perf_counter() - start
        if args.manifest:
            manifest.write(args.manifest)
        elif primary:
            manifest.write(f"{primary}.manifest.json")
        else:
            logger.debug(
                "Run manifest: %s", json.dumps(manifest.to_dict(), sort_keys=True)
            )
    except (KitError, ValueError, OSError) as exc:
        print(f"{type(exc).__name__}: {str(exc).strip()}", file=sys.stderr)
        return 1
    return 0


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(dispatch(argv))
