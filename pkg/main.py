#!/usr/bin/env python3
# /// script
# requires-python = ">=3.11"
# dependencies = ["torch", "numpy", "scipy", "safetensors"]
# ///
"""DoMoRA-adapted self-supervised depth and pose, desk scale.

Usage:
    ./main.py gen-scene --kind KIND --seed N --out DIR
    ./main.py train [--config FILE] --out DIR [--scene DIR] [--KEY VALUE ...]
    ./main.py eval-depth --pred DIR --gt DIR [--out DIR]
    ./main.py eval-pose --pred FILE --gt FILE [--rigid] [--out DIR]
    ./main.py grad-check [--module all|adapters|encoder|decoder|warp]
    ./main.py inspect-params --checkpoint FILE

Every config key is also a flag of the same name, e.g. --learning_rate 1e-3.

Exit codes: 0 success, 1 other failure, 2 config error, 3 numerical failure,
4 parse error.

Examples:
    ./main.py gen-scene --kind textured-plane --seed 0 --out runs/scene
    ./main.py train --scene runs/scene --out runs/train --max_steps 2000
    ./main.py eval-pose --pred runs/train/pred_traj.txt --gt runs/scene/poses.txt
"""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path
from typing import Any

import argparse
import json
import logging
import math
import os

from adapters import parameter_count
from config import (
    add_setting_flags,
    format_settings,
    load_settings,
    overrides_from_args,
    provenance,
)
from dataio import (
    load_depths,
    load_sequence,
    provenance_line,
    read_manifest,
    read_tum,
    save_checkpoint,
    save_depths,
    save_sequence,
    write_csv,
    write_jsonl,
    write_tum,
)
from metrics import MetricsReport, ate, bbox_diagonal, evaluate_depths
from nets import grad_check_suite
from scene import SCENE_KINDS, generate_scene
from train import LOSS_LOG_HEADER, evaluate, train
from util import ConfigError, EndoFastError, NumericalError, ParseError


log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_PARSE = 4


def emit(record: dict[str, Any]) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


# ===========================================================================
# Commands
# ===========================================================================


def cmd_gen_scene(args: argparse.Namespace) -> int:
    scene = generate_scene(args.seed, args.kind, args.frames, args.size, args.size)
    save_sequence(scene, args.out)
    emit({"kind": scene.kind, "seed": scene.seed, "frames": len(scene), "out": str(args.out)})
    return EXIT_OK


def _write_depth_frames(
    path: Path, report: MetricsReport, stamp: dict[str, Any] | None = None
) -> None:
    write_csv(
        path,
        ("frame", "abs_rel", "sq_rel", "rmse", "delta"),
        ((i, m.abs_rel, m.sq_rel, m.rmse, m.delta) for i, m in enumerate(report.per_frame)),
        stamp,
    )


def _write_trajectory(
    path: Path, aligned: Any, gt: Any, stamp: dict[str, Any] | None = None
) -> None:
    write_csv(
        path,
        ("frame", "pred_x", "pred_y", "pred_z", "gt_x", "gt_y", "gt_z"),
        (
            (i, *map(float, a), *map(float, g))
            for i, (a, g) in enumerate(zip(aligned, gt, strict=True))
        ),
        stamp,
    )


def cmd_train(args: argparse.Namespace) -> int:
    settings = load_settings(args.config, overrides_from_args(args))
    if args.scene:
        scene = load_sequence(args.scene)
    else:
        size = settings["image_size"]
        scene = generate_scene(
            settings["seed"], settings["scene_kind"], settings["frames"], size, size
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stamp = provenance(settings)
    (out / "settings.txt").write_text(provenance_line(stamp) + format_settings(settings))

    result = train(settings, scene)
    write_csv(out / "loss_log.csv", LOSS_LOG_HEADER, result.log_rows, stamp)

    model = result.model
    manifest_extra = {
        "adapter": model.adapter_info,
        **stamp,
        "settings": settings,
        "steps": result.steps,
    }
    checkpoint = out / "checkpoint.safetensors"
    save_checkpoint(model, checkpoint, result.partition.trainable, manifest_extra)

    report, preds, traj = evaluate(model, scene, settings)
    save_depths(out / "pred_depth", preds)
    write_tum(out / "pred_traj.txt", traj, provenance=stamp)
    write_jsonl(out / "report.jsonl", report.rows())
    _write_depth_frames(out / "depth_frames.csv", report, stamp)
    if report.ate_sim3 is not None:
        _write_trajectory(
            out / "trajectory.csv", report.ate_sim3.aligned, scene.positions(), stamp
        )
    for row in report.rows():
        emit(row)
    return EXIT_OK


def _depth_folder(path: str) -> Path:
    p = Path(path)
    return p / "depth" if (p / "depth").is_dir() else p


def cmd_eval_depth(args: argparse.Namespace) -> int:
    preds = load_depths(_depth_folder(args.pred))
    gts = load_depths(_depth_folder(args.gt))
    if len(preds) != len(gts):
        raise ConfigError(f"{len(preds)} predicted depth maps for {len(gts)} ground-truth maps")
    mean, per_frame = evaluate_depths(preds, gts)
    report = MetricsReport(depth=mean, per_frame=per_frame)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(out / "report.jsonl", report.rows())
        _write_depth_frames(out / "depth_frames.csv", report)
    for row in report.rows():
        emit(row)
    return EXIT_OK


def _tum_path(path: str) -> Path:
    p = Path(path)
    return p / "poses.txt" if p.is_dir() else p


def cmd_eval_pose(args: argparse.Namespace) -> int:
    _, pred = read_tum(_tum_path(args.pred))
    _, gt = read_tum(_tum_path(args.gt))
    report = MetricsReport(bbox_diagonal=bbox_diagonal(gt))
    report.ate_sim3 = ate(pred, gt)
    if args.rigid:
        report.ate_rigid = ate(pred, gt, rigid=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(out / "report.jsonl", report.rows())
        _write_trajectory(out / "trajectory.csv", report.ate_sim3.aligned, gt.t.numpy())
    for row in report.rows():
        emit(row)
    return EXIT_OK


def cmd_grad_check(args: argparse.Namespace) -> int:
    results = grad_check_suite(args.module)
    for res in results:
        emit(res.as_dict())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


def closed_form_trainable(manifest: dict[str, Any]) -> int:
    """Per-layer adapter counts from the rank vector plus neck and head sizes."""
    settings = manifest["settings"]
    adapter = manifest["adapter"]
    kind = adapter["kind"]
    d = settings["embed_dim"]
    encoder_blocks = settings["depth_layers"] + settings["pose_encoder_layers"]
    total = 0
    if kind != "none":
        for i, r in enumerate(adapter["ranks"]):
            cross = adapter["adapt_cross_attention"] and i >= encoder_blocks
            total += (4 if cross else 2) * parameter_count(d, d, r, kind)
    heads = ("depth_net.neck.", "depth_net.head.", "pose_net.head.", "pose_net.convs.")
    for arr in manifest["arrays"]:
        if arr["name"].startswith(heads):
            total += math.prod(arr["shape"])
    return total


def cmd_inspect_params(args: argparse.Namespace) -> int:
    manifest = read_manifest(args.checkpoint)
    if "arrays" not in manifest:
        raise ConfigError(f"{args.checkpoint} carries no manifest")
    reported = 0
    for arr in manifest["arrays"]:
        emit(arr)
        if arr["trainable"]:
            reported += math.prod(arr["shape"])
    expected = closed_form_trainable(manifest)
    emit(
        {
            "audit": "trainable_count",
            "reported": reported,
            "closed_form": expected,
            "match": reported == expected,
            "ranks": manifest["adapter"]["ranks"],
            "config_hash": manifest.get("config_hash"),
        }
    )
    return EXIT_OK if reported == expected else EXIT_FAILURE


# ===========================================================================
# Entry Point
# ===========================================================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="DoMoRA self-supervised depth and pose")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="Render a synthetic sequence")
    p.add_argument("--kind", choices=SCENE_KINDS, default="textured-plane")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--size", type=int, default=64, help="Image height and width")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="Train adapters and heads, then evaluate")
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--out", required=True)
    p.add_argument("--scene", help="Sequence folder (default: generate from settings)")
    add_setting_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-depth", help="Median-scaled depth metrics")
    p.add_argument("--pred", required=True, help="Folder of .dpth predictions")
    p.add_argument("--gt", required=True, help="Folder of .dpth ground truth or a sequence")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_depth)

    p = sub.add_parser("eval-pose", help="Absolute trajectory error")
    p.add_argument("--pred", required=True, help="TUM trajectory")
    p.add_argument("--gt", required=True, help="TUM trajectory or a sequence folder")
    p.add_argument("--rigid", action="store_true", help="Also report 6-DoF alignment")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_pose)

    p = sub.add_parser("grad-check", help="Finite-difference gradient checks")
    p.add_argument(
        "--module", default="all", choices=("all", "adapters", "encoder", "decoder", "warp")
    )
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("inspect-params", help="Partition listing and count audit")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect_params)
    return parser


def setup_logging(debug: bool) -> None:
    # LOG_LEVEL env var takes precedence, then --debug flag, then default INFO
    log_level_env = os.environ.get("LOG_LEVEL", "").upper()
    if log_level_env in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        log_level = getattr(logging, log_level_env)
    else:
        log_level = logging.DEBUG if debug else logging.INFO
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s | %(levelname)s | %(message)s",
        datefmt="%H:%M:%S",
        force=True,
    )


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.debug)
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("Config error: %s", e)
        return EXIT_CONFIG
    except NumericalError as e:
        log.error("Numerical failure: %s", e)
        return EXIT_NUMERICAL
    except ParseError as e:
        log.error("Parse error: %s", e)
        return EXIT_PARSE
    except EndoFastError as e:
        log.error("%s: %s", type(e).__name__, e)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
