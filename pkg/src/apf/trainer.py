"""Training loop: AdamW with decoupled decay, warmup-cosine lr, clipping.

One step backpropagates the mean loss of a batch of videos, clips the global
gradient norm, and applies AdamW.  After every epoch the model predicts the
validation split, gets scored by mAP, and the best-so-far weights are kept.
Everything is seeded; rerunning with the same inputs reproduces the log and
checkpoints byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as da
from . import matching as mt
from . import model as mdl
from . import tensor as tc
from .errors import ConfigError, NumericError
from .evaluation import evaluate
from .tensor import Parameters, Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 2
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    clip_norm: float = 1.0
    val_fraction: float = 0.2
    seed: int = 0
    loss: mt.LossWeights = field(default_factory=mt.LossWeights)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigError(
                f"warmup_epochs must be in [0, epochs], got {self.warmup_epochs} of {self.epochs}"
            )

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = {k: getattr(v, k) for k in v.__dataclass_fields__} if f.name == "loss" else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        kw = dict(d)
        if "loss" in kw and isinstance(kw["loss"], dict):
            kw["loss"] = mt.LossWeights(**kw["loss"])
        return cls(**kw)


class AdamW:
    """theta <- theta - lr*wd*theta - lr*mhat/(sqrt(vhat)+eps), decay decoupled."""

    def __init__(
        self,
        params: Parameters,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp to base over the warmup, then a cosine half-wave down."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(params: Parameters, max_norm: float) -> float:
    """Scale all gradients so their joint norm is at most ``max_norm``."""
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise NumericError(f"gradient norm is {norm}")
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad *= scale
    return norm


def video_targets(video: da.Video) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (segments, labels) arrays for the loss."""
    if video.annotations:
        segs = np.array([a["segment"] for a in video.annotations], dtype=np.float64) / video.duration
        labels = np.array([a["label"] for a in video.annotations], dtype=np.intp)
    else:
        segs = np.zeros((0, 2))
        labels = np.zeros(0, dtype=np.intp)
    return segs, labels


def predict_video(
    video: da.Video, params: Parameters, cfg: mdl.ModelConfig, top_k: int | None = None
) -> list[dict]:
    """Every (query, class) pair becomes a detection in seconds."""
    from scipy.special import expit

    with tc.no_grad():
        out = mdl.model_forward(Tensor(video.model_input()), params, cfg)
    scores = expit(out.logits.data)
    segments = out.segments.data * video.duration
    dets = [
        {
            "segment": [float(segments[q, 0]), float(segments[q, 1])],
            "label": int(c),
            "score": float(scores[q, c]),
        }
        for q in range(cfg.num_queries)
        for c in range(cfg.num_classes)
    ]
    dets.sort(key=lambda d: -d["score"])
    return dets[:top_k] if top_k else dets


def validation_map(
    videos: list[da.Video], params: Parameters, cfg: mdl.ModelConfig
) -> float:
    gt = da.ground_truth_index(videos)
    dets = {v.video_id: predict_video(v, params, cfg) for v in videos}
    return evaluate(gt, dets).mean_map


@dataclass
class TrainResult:
    records: list[dict]
    best_epoch: int
    best_val_map: float | None
    best_path: str | None
    last_path: str | None


def train_loop(
    videos: list[da.Video],
    cfg: mdl.ModelConfig,
    params: Parameters,
    tcfg: TrainConfig,
    out_dir: str | Path | None = None,
    log=None,
) -> TrainResult:
    train_idx, val_idx = da.split_indices(len(videos), tcfg.val_fraction, tcfg.seed)
    train_videos = [videos[i] for i in train_idx]
    val_videos = [videos[i] for i in val_idx]
    if not train_videos:
        raise ConfigError("no training videos after the split")

    opt = AdamW(params, weight_decay=tcfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_videos) / tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    warmup_steps = tcfg.warmup_epochs * steps_per_epoch

    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = best_path = last_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.ndjson"
        log_path.write_text("")
        best_path = out_dir / "best.ckpt"
        last_path = out_dir / "last.ckpt"

    records: list[dict] = []
    best_epoch, best_map = -1, -math.inf
    step = 0
    for epoch in range(tcfg.epochs):
        sums = {"loss": 0.0, "loss_cls": 0.0, "loss_reg": 0.0, "loss_l1": 0.0}
        last_lr = 0.0
        for batch in da.epoch_batches(len(train_videos), tcfg.batch_size, tcfg.seed, epoch):
            params.zero_grad()
            totals = []
            for i in batch:
                video = train_videos[i]
                out = mdl.model_forward(Tensor(video.model_input()), params, cfg)
                segs, labels = video_targets(video)
                breakdown = mt.detection_loss(out.logits, out.segments, segs, labels, tcfg.loss)
                totals.append(breakdown.total)
                sums["loss"] += breakdown.total.item()
                sums["loss_cls"] += breakdown.cls
                sums["loss_reg"] += breakdown.diou
                sums["loss_l1"] += breakdown.l1
            batch_loss = totals[0]
            for t in totals[1:]:
                batch_loss = tc.add(batch_loss, t)
            batch_loss = tc.mul(batch_loss, 1.0 / len(batch))
            if not math.isfinite(batch_loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            tc.backward(batch_loss)
            clip_gradients(params, tcfg.clip_norm)
            last_lr = lr_at(step, total_steps, tcfg.lr, warmup_steps)
            opt.step(last_lr)
            step += 1

        val_map = validation_map(val_videos, params, cfg) if val_videos else None
        record = {
            "epoch": epoch,
            "step": step,
            "lr": last_lr,
            "loss": sums["loss"] / len(train_videos),
            "loss_cls": sums["loss_cls"] / len(train_videos),
            "loss_reg": sums["loss_reg"] / len(train_videos),
            "loss_l1": sums["loss_l1"] / len(train_videos),
            "val_map": val_map,
        }
        records.append(record)
        if log is not None:
            log(
                f"epoch {epoch:3d}  loss {record['loss']:.4f}  "
                + (f"val mAP {val_map:.4f}" if val_map is not None else "no val split")
            )
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        improved = val_map is not None and val_map > best_map
        if val_map is None:
            best_epoch = epoch
        elif improved:
            best_epoch, best_map = epoch, val_map
        if out_dir is not None:
            extra = {"epoch": epoch, "val_map": val_map, "train_config": tcfg.to_dict()}
            mdl.save_checkpoint(last_path, params, cfg.to_dict(), extra=extra)
            if improved or (val_map is None and epoch == tcfg.epochs - 1):
                mdl.save_checkpoint(best_path, params, cfg.to_dict(), extra=extra)

    return TrainResult(
        records=records,
        best_epoch=best_epoch,
        best_val_map=None if best_map == -math.inf else best_map,
        best_path=str(best_path) if best_path else None,
        last_path=str(last_path) if last_path else None,
    )
