"""Command-line surface: synth | train | eval | gradcheck | bench.

Settings resolve as defaults < JSON config file < flags, and every command
that writes files drops a manifest.json holding the fully resolved snapshot,
the seed, and the artifact names.  Passing a manifest back via --config
reproduces the run bit-identically (wall-clock fields aside).

Exit codes: 0 success, 1 check failure, 2 usage or bad input, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import attention as att
from . import data as da
from . import gradcheck as gc
from . import model as mdl
from . import report as rpt
from . import trainer as tr
from .errors import ApfError, CheckFailure, ConfigError, NumericError
from .evaluation import DEFAULT_THRESHOLDS, evaluate, nms_1d, save_detections
from .matching import LossWeights
from .tensor import Tensor

log = logging.getLogger("apf")

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

SYNTH_DEFAULTS = {
    "out": None,
    "videos": 62,
    "classes": 5,
    "feature_dim": 16,
    "min_len": 96,
    "max_len": 160,
    "noise": 0.25,
    "signal": 1.0,
    "min_segments": 1,
    "max_segments": 2,
    "min_seg_len": 32,
    "max_seg_len": 64,
    "frame_stride": 1.0,
    "seed": 7,
}

TRAIN_DEFAULTS = {
    "data": None,
    "out": None,
    "epochs": 30,
    "batch_size": 2,
    "lr": 1e-4,
    "wd": 1e-4,
    "lambda": 1.0,
    "warmup": 5,
    "clip_norm": 1.0,
    "val_fraction": 0.2,
    "window": 5,
    "shift_enc": 9,
    "shift_dec": 7,
    "fusion": "alpha-complement",
    "model_dim": 64,
    "heads": 4,
    "enc_layers": 2,
    "dec_layers": 2,
    "queries": 10,
    "mlp_ratio": 4,
    "seed": 0,
}

EVAL_DEFAULTS = {
    "data": None,
    "checkpoint": None,
    "out": None,
    "thresholds": list(DEFAULT_THRESHOLDS),
    "top_k": None,
    "nms": None,
    "seed": 0,
}

BENCH_DEFAULTS = {
    "out": None,
    "lengths": [128, 256, 512],
    "window": 5,
    "heads": 4,
    "model_dim": 64,
    "runs": 12,
    "seed": 0,
}


def _setup_logging() -> None:
    name = os.environ.get("APF_LOG", "error").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if name not in levels:
        raise ConfigError(f"APF_LOG must be one of error, info, debug, got {name!r}")
    logging.basicConfig(level=levels[name], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    if obj.get("tool") == "apf" and "config" in obj:
        # a manifest round-trips as a config file
        return obj["config"]
    return obj


def _resolve(defaults: dict, file_cfg: dict, flag_cfg: dict) -> dict:
    out = dict(defaults)
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for src in (file_cfg, flag_cfg):
        for key, value in src.items():
            if value is not None:
                out[key] = value
    return out


def _require(cfg: dict, key: str, hint: str) -> None:
    if cfg.get(key) is None:
        raise ConfigError(f"missing {key!r}: pass {hint} or set it in the config file")


def _write_manifest(out_dir: Path, command: str, cfg: dict, artifacts: dict, wall_clock: list[str] | None = None) -> Path:
    manifest = {
        "tool": "apf",
        "version": __version__,
        "command": command,
        "seed": cfg.get("seed"),
        "config": cfg,
        "artifacts": artifacts,
        "wall_clock": wall_clock or [],
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _parse_thresholds(text: str) -> list[float]:
    """Accepts '0.3:0.1:0.7' (start:step:stop, inclusive) or '0.3,0.5'."""
    try:
        if ":" in text:
            start, step, stop = (float(x) for x in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError("empty range")
            values = list(np.round(np.arange(start, stop + step / 2, step), 10))
        else:
            values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad thresholds {text!r}: {exc}") from exc
    if not values or any(not 0.0 < v <= 1.0 for v in values):
        raise ConfigError(f"thresholds must lie in (0, 1], got {text!r}")
    return values


def _parse_lengths(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad lengths {text!r}: {exc}") from exc
    if not values or any(v < 1 for v in values):
        raise ConfigError(f"lengths must be positive integers, got {text!r}")
    return values


# ---------------------------------------------------------------- commands


def cmd_synth(args: argparse.Namespace) -> int:
    flag_cfg = {
        "out": args.out,
        "videos": args.videos,
        "classes": args.classes,
        "feature_dim": args.feature_dim,
        "min_len": args.min_len,
        "max_len": args.max_len,
        "noise": args.noise,
        "signal": args.signal,
        "min_segments": args.min_segments,
        "max_segments": args.max_segments,
        "min_seg_len": args.min_seg_len,
        "max_seg_len": args.max_seg_len,
        "frame_stride": args.frame_stride,
        "seed": args.seed,
    }
    cfg = _resolve(SYNTH_DEFAULTS, _load_config_file(args.config), flag_cfg)
    _require(cfg, "out", "--out DIR")
    spec = da.SynthSpec(
        num_videos=cfg["videos"],
        num_classes=cfg["classes"],
        feature_dim=cfg["feature_dim"],
        min_len=cfg["min_len"],
        max_len=cfg["max_len"],
        noise=cfg["noise"],
        signal=cfg["signal"],
        min_segments=cfg["min_segments"],
        max_segments=cfg["max_segments"],
        min_seg_len=cfg["min_seg_len"],
        max_seg_len=cfg["max_seg_len"],
        frame_stride=cfg["frame_stride"],
        seed=cfg["seed"],
    )
    videos = da.generate(spec)
    out_dir = Path(cfg["out"])
    da.save_dataset(out_dir, videos, spec.num_classes)
    artifacts = {
        "annotations": "annotations.json",
        "features": [f"features/{v.video_id}.apff" for v in videos],
    }
    _write_manifest(out_dir, "synth", cfg, artifacts)
    total_segments = sum(len(v.annotations) for v in videos)
    print(f"wrote {len(videos)} videos, {total_segments} segments, {spec.num_classes} classes to {out_dir}")
    return EXIT_OK


def _train_configs(cfg: dict, num_classes: int, feature_dim: int) -> tuple[mdl.ModelConfig, tr.TrainConfig]:
    model_cfg = mdl.ModelConfig(
        feature_dim=feature_dim,
        num_classes=num_classes,
        model_dim=cfg["model_dim"],
        heads=cfg["heads"],
        enc_layers=cfg["enc_layers"],
        dec_layers=cfg["dec_layers"],
        num_queries=cfg["queries"],
        mlp_ratio=cfg["mlp_ratio"],
        window=cfg["window"],
        enc_shift=cfg["shift_enc"],
        dec_shift=cfg["shift_dec"],
        fusion_mode=cfg["fusion"],
    )
    train_cfg = tr.TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        weight_decay=cfg["wd"],
        warmup_epochs=cfg["warmup"],
        clip_norm=cfg["clip_norm"],
        val_fraction=cfg["val_fraction"],
        seed=cfg["seed"],
        loss=LossWeights(reg_lambda=cfg["lambda"]),
    )
    return model_cfg, train_cfg


def cmd_train(args: argparse.Namespace) -> int:
    flag_cfg = {
        "data": args.data,
        "out": args.out,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "wd": args.wd,
        "lambda": args.reg_lambda,
        "warmup": args.warmup,
        "clip_norm": args.clip_norm,
        "val_fraction": args.val_fraction,
        "window": args.window,
        "shift_enc": args.shift_enc,
        "shift_dec": args.shift_dec,
        "fusion": args.fusion,
        "model_dim": args.model_dim,
        "heads": args.heads,
        "enc_layers": args.enc_layers,
        "dec_layers": args.dec_layers,
        "queries": args.queries,
        "mlp_ratio": args.mlp_ratio,
        "seed": args.seed,
    }
    cfg = _resolve(TRAIN_DEFAULTS, _load_config_file(args.config), flag_cfg)
    _require(cfg, "data", "--data DIR")
    _require(cfg, "out", "--out DIR")

    num_classes, videos = da.load_dataset(cfg["data"])
    feature_dim = videos[0].features.shape[1]
    model_cfg, train_cfg = _train_configs(cfg, num_classes, feature_dim)
    params = mdl.build_model(model_cfg, seed=cfg["seed"])

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    result = tr.train_loop(videos, model_cfg, params, train_cfg, out_dir=out_dir, log=print)

    rpt.training_curves(result.records, out_dir / "training_curves.png")
    artifacts = {
        "log": "train_log.ndjson",
        "best_checkpoint": "best.ckpt",
        "last_checkpoint": "last.ckpt",
        "figure": "training_curves.png",
    }
    _write_manifest(out_dir, "train", cfg, artifacts)
    if result.best_val_map is not None:
        print(f"best val mAP {result.best_val_map:.4f} at epoch {result.best_epoch}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    flag_cfg = {
        "data": args.data,
        "checkpoint": args.checkpoint,
        "out": args.out,
        "thresholds": _parse_thresholds(args.thresholds) if args.thresholds is not None else None,
        "top_k": args.top_k,
        "nms": args.nms,
        "seed": args.seed,
    }
    cfg = _resolve(EVAL_DEFAULTS, _load_config_file(args.config), flag_cfg)
    _require(cfg, "data", "--data DIR")
    _require(cfg, "checkpoint", "--checkpoint FILE")
    _require(cfg, "out", "--out DIR")

    model_cfg, params, _extra = mdl.restore_model(cfg["checkpoint"])
    num_classes, videos = da.load_dataset(cfg["data"])
    feature_dim = videos[0].features.shape[1]
    if model_cfg.num_classes != num_classes:
        raise ConfigError(
            f"checkpoint/dataset mismatch on num_classes: {model_cfg.num_classes} vs {num_classes}"
        )
    if model_cfg.feature_dim != feature_dim:
        raise ConfigError(
            f"checkpoint/dataset mismatch on feature_dim: {model_cfg.feature_dim} vs {feature_dim}"
        )

    def detect(video: da.Video) -> tuple[str, list[dict]]:
        dets = tr.predict_video(video, params, model_cfg, top_k=cfg["top_k"])
        if cfg["nms"] is not None:
            dets = nms_1d(dets, cfg["nms"])
        return video.video_id, dets

    if args.jobs and args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            detections = dict(pool.map(detect, videos))
    else:
        detections = dict(map(detect, videos))

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_detections(out_dir / "detections.json", detections)
    report = evaluate(da.ground_truth_index(videos), detections, thresholds=cfg["thresholds"])
    report_dict = report.to_dict()
    (out_dir / "eval_report.json").write_text(json.dumps(report_dict, indent=2, sort_keys=True) + "\n")
    rpt.eval_figure(report_dict, out_dir / "eval_report.png")
    artifacts = {
        "detections": "detections.json",
        "report": "eval_report.json",
        "figure": "eval_report.png",
    }
    _write_manifest(out_dir, "eval", cfg, artifacts)

    keys = sorted(report_dict["map_per_threshold"])
    print("tIoU " + "  ".join(f"{k:>6s}" for k in keys) + "     avg")
    print(
        "mAP  "
        + "  ".join(f"{report_dict['map_per_threshold'][k]:6.3f}" for k in keys)
        + f"  {report_dict['mean_map']:6.3f}"
    )
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    mutate = (lambda g: -g) if args.flip_sign else None
    suites = [
        ("tensor-ops", gc.suite_tensor_ops, {}),
        ("attention", gc.suite_attention, {}),
        ("matching", gc.suite_matching, {}),
        ("model", gc.suite_model, {}),
    ]
    failures = 0
    for name, suite, kwargs in suites:
        if args.seeds is not None:
            kwargs = dict(kwargs, seeds=args.seeds)
        results = suite(mutate=mutate, **kwargs)
        worst = max(r.worst for r in results)
        for r in results:
            mark = "ok" if r.ok else "FAIL"
            print(f"{name:11s} {r.name:34s} {r.worst:11.3e}  {mark}")
            failures += 0 if r.ok else 1
        print(f"{name:11s} {'<suite worst>':34s} {worst:11.3e}")
    if failures:
        raise CheckFailure(f"{failures} gradient check(s) exceeded the {gc.BOUND:g} bound")
    print(f"all gradient checks within {gc.BOUND:g}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    flag_cfg = {
        "out": args.out,
        "lengths": _parse_lengths(args.lengths) if args.lengths is not None else None,
        "window": args.window,
        "heads": args.heads,
        "model_dim": args.model_dim,
        "runs": args.runs,
        "seed": args.seed,
    }
    cfg = _resolve(BENCH_DEFAULTS, _load_config_file(args.config), flag_cfg)
    _require(cfg, "out", "--out DIR")
    if cfg["runs"] < 10:
        raise ConfigError(f"bench needs at least 10 runs for stable medians, got {cfg['runs']}")

    acfg = att.AttentionConfig(model_dim=cfg["model_dim"], heads=cfg["heads"], window=cfg["window"])
    head_dim = acfg.head_dim
    rows = []
    for length in cfg["lengths"]:
        counts = att.window_dot_counts(length, cfg["window"])
        rng = np.random.default_rng([cfg["seed"], length])
        q, k, v = (Tensor(rng.standard_normal((cfg["heads"], length, head_dim))) for _ in range(3))
        scale = att.attention_scale(acfg, length)

        windowed_ms, dense_ms = [], []
        for _ in range(cfg["runs"]):
            t0 = time.perf_counter()
            att.windowed_attention(q, k, v, acfg)
            windowed_ms.append((time.perf_counter() - t0) * 1e3)
            t0 = time.perf_counter()
            mdl.dense_attention(q, k, v, scale)
            dense_ms.append((time.perf_counter() - t0) * 1e3)

        rows.append(
            {
                "length": length,
                "window": cfg["window"],
                "heads": cfg["heads"],
                "interior": counts["interior"],
                "actual": counts["actual"],
                "dense": counts["dense"],
                "dense_over_actual": counts["dense"] / counts["actual"],
                "windowed_ms": statistics.median(windowed_ms),
                "dense_ms": statistics.median(dense_ms),
            }
        )

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    fieldnames = list(rows[0])
    with open(out_dir / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    rpt.bench_figure(rows, out_dir / "bench.png")
    artifacts = {"csv": "bench.csv", "figure": "bench.png"}
    _write_manifest(
        out_dir,
        "bench",
        cfg,
        artifacts,
        wall_clock=["bench.csv:windowed_ms", "bench.csv:dense_ms", "bench.png"],
    )

    print(f"{'T':>6s} {'interior':>9s} {'actual':>9s} {'dense':>9s} {'dense/actual':>13s} {'win ms':>8s} {'dense ms':>9s}")
    for r in rows:
        print(
            f"{r['length']:6d} {r['interior']:9d} {r['actual']:9d} {r['dense']:9d} "
            f"{r['dense_over_actual']:13.2f} {r['windowed_ms']:8.2f} {r['dense_ms']:9.2f}"
        )
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apf", description="Temporal action localization pipeline.")
    parser.add_argument("--version", action="version", version=f"apf {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed override for this command")
    common.add_argument("--config", default=None, help="JSON config file or a previous manifest.json")
    common.add_argument("--jobs", type=int, default=1, help="worker threads across videos (eval)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", default=None, help="output dataset directory")
    p.add_argument("--videos", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--dim", dest="feature_dim", type=int, default=None, help="feature channels")
    p.add_argument("--min-len", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--signal", type=float, default=None)
    p.add_argument("--min-segments", type=int, default=None)
    p.add_argument("--max-segments", type=int, default=None)
    p.add_argument("--min-seg-len", type=int, default=None)
    p.add_argument("--max-seg-len", type=int, default=None)
    p.add_argument("--frame-stride", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    p.add_argument("--data", default=None, help="dataset directory from synth")
    p.add_argument("--out", default=None, help="run output directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--wd", type=float, default=None)
    p.add_argument("--lambda", dest="reg_lambda", type=float, default=None, help="regression loss weight")
    p.add_argument("--warmup", type=int, default=None, help="warmup epochs")
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--shift-enc", type=int, default=None)
    p.add_argument("--shift-dec", type=int, default=None)
    p.add_argument("--fusion", default=None, choices=[m.value for m in att.FusionMode])
    p.add_argument("--model-dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--enc-layers", type=int, default=None)
    p.add_argument("--dec-layers", type=int, default=None)
    p.add_argument("--queries", type=int, default=None)
    p.add_argument("--mlp-ratio", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--thresholds", default=None, help="'0.3:0.1:0.7' or comma list")
    p.add_argument("--top-k", type=int, default=None, help="keep best k detections per video")
    p.add_argument("--nms", type=float, default=None, help="suppress overlaps above this tIoU")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    p.add_argument("--seeds", type=int, default=None, help="random draws per case")
    p.add_argument("--flip-sign", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", parents=[common], help="attention complexity benchmark")
    p.add_argument("--out", default=None)
    p.add_argument("--lengths", default=None, help="comma list of sequence lengths")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--model-dim", type=int, default=None)
    p.add_argument("--runs", type=int, default=None, help="timed repetitions per length")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except CheckFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ApfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
