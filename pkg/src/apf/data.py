"""Synthetic localization data, file formats, splits, and batch order.

Each synthetic video is Gaussian noise, (T, C) time-major, with an
orthonormal per-class signature vector added over each annotated span.
Segments never overlap: span lengths are drawn first, then packed by adding
a sorted uniform jitter to their prefix sums.  Features go to disk in a small
binary container, annotations and durations into one JSON file per dataset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, GenerationError, ValidationError

FEATURE_MAGIC = b"APFF"
PLACEMENT_ATTEMPTS = 200


@dataclass(frozen=True)
class SynthSpec:
    num_videos: int = 62
    num_classes: int = 5
    feature_dim: int = 16
    min_len: int = 96
    max_len: int = 160
    noise: float = 0.25
    signal: float = 1.0
    min_segments: int = 1
    max_segments: int = 2
    min_seg_len: int = 32
    max_seg_len: int = 64
    frame_stride: float = 1.0
    seed: int = 7

    def __post_init__(self):
        if self.num_videos < 1:
            raise ConfigError(f"num_videos must be positive, got {self.num_videos}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if self.num_classes > self.feature_dim:
            raise ConfigError(
                f"need feature_dim >= num_classes for orthonormal signatures, got {self.feature_dim} < {self.num_classes}"
            )
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.min_seg_len < 4:
            raise ConfigError(f"segments must span at least 4 frames, got {self.min_seg_len}")
        if self.min_seg_len > self.max_seg_len:
            raise ConfigError(f"bad segment length range [{self.min_seg_len}, {self.max_seg_len}]")
        if not 1 <= self.min_segments <= self.max_segments:
            raise ConfigError(f"bad segment count range [{self.min_segments}, {self.max_segments}]")
        if self.noise < 0 or not np.isfinite(self.noise):
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        if self.frame_stride <= 0:
            raise ConfigError(f"frame_stride must be positive, got {self.frame_stride}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Video:
    video_id: str
    features: np.ndarray  # (T, C) time-major
    duration: float
    annotations: list[dict] = field(default_factory=list)  # {"segment": [s, e], "label": int}

    @property
    def length(self) -> int:
        return self.features.shape[0]

    def model_input(self) -> np.ndarray:
        """Channel-major (C, T) view for the model."""
        return np.ascontiguousarray(self.features.T)


def class_signatures(num_classes: int, feature_dim: int, rng: np.random.Generator) -> np.ndarray:
    """(num_classes, feature_dim) rows, orthonormal by QR."""
    q, r = np.linalg.qr(rng.standard_normal((feature_dim, feature_dim)))
    # fix the sign convention so the draw alone pins the result
    q = q * np.sign(np.diag(r))
    return q.T[:num_classes].copy()


def place_segments(
    length: int, count: int, min_len: int, max_len: int, rng: np.random.Generator
) -> list[tuple[int, int]]:
    """Non-overlapping [start, end) frame spans via jittered prefix sums."""
    for _ in range(PLACEMENT_ATTEMPTS):
        lengths = rng.integers(min_len, max_len + 1, size=count)
        slack = length - int(lengths.sum())
        if slack < 0:
            continue
        jitter = np.sort(rng.integers(0, slack + 1, size=count))
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]) + jitter
        return [(int(s), int(s + l)) for s, l in zip(starts, lengths)]
    raise GenerationError(
        f"could not fit {count} segments of {min_len}..{max_len} frames into {length} after {PLACEMENT_ATTEMPTS} attempts"
    )


def generate(spec: SynthSpec) -> list[Video]:
    rng = np.random.default_rng(spec.seed)
    signatures = class_signatures(spec.num_classes, spec.feature_dim, rng)
    videos = []
    for i in range(spec.num_videos):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        feats = rng.normal(0.0, spec.noise, (length, spec.feature_dim))
        count = int(rng.integers(spec.min_segments, spec.max_segments + 1))
        spans = place_segments(length, count, spec.min_seg_len, spec.max_seg_len, rng)
        annotations = []
        for start, end in spans:
            label = int(rng.integers(0, spec.num_classes))
            feats[start:end] += spec.signal * signatures[label]
            annotations.append(
                {
                    "segment": [start * spec.frame_stride, end * spec.frame_stride],
                    "label": label,
                }
            )
        videos.append(
            Video(
                video_id=f"synth_{i:04d}",
                features=feats,
                duration=length * spec.frame_stride,
                annotations=annotations,
            )
        )
    return videos


def split_indices(count: int, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Deterministic (train, val) index partition, both ascending."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    order = np.random.default_rng([seed, 0x5EED]).permutation(count)
    n_val = int(count * val_fraction)
    val = sorted(int(i) for i in order[:n_val])
    train = sorted(int(i) for i in order[n_val:])
    return train, val


def epoch_batches(count: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Seeded per-epoch permutation chopped into batches; the tail stays."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(count)
    return [[int(i) for i in order[lo : lo + batch_size]] for lo in range(0, count, batch_size)]


def ground_truth_index(videos: list[Video]) -> dict[str, list[dict]]:
    return {v.video_id: v.annotations for v in videos}


# --- feature container --------------------------------------------------------


def save_features(path: str | Path, video: Video) -> None:
    header = {
        "video_id": video.video_id,
        "channels": int(video.features.shape[1]),
        "length": int(video.features.shape[0]),
        "duration": float(video.duration),
        "dtype": "<f8",
        "order": "time-major",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(video.features, dtype="<f8").tobytes())


def load_features(path: str | Path) -> Video:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read feature file: {exc}") from exc
    if len(raw) < 8 or raw[:4] != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a feature file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise DataFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: header is not valid JSON: {exc}") from exc
    for key in ("video_id", "channels", "length", "duration"):
        if key not in header:
            raise DataFormatError(f"{path}: header missing {key!r}")
    payload = raw[8 + hlen :]
    expected = header["channels"] * header["length"]
    if len(payload) % 8 != 0 or len(payload) < 8 * expected:
        raise DataFormatError(
            f"{path}: truncated payload, {len(payload)} bytes for {expected} values"
        )
    if len(payload) > 8 * expected:
        raise DataFormatError(
            f"{path}: size mismatch, {len(payload) // 8} values but header declares {expected}"
        )
    feats = np.frombuffer(payload, dtype="<f8").reshape(header["length"], header["channels"])
    return Video(
        video_id=str(header["video_id"]),
        features=feats.astype(np.float64),
        duration=float(header["duration"]),
    )


# --- annotations file ---------------------------------------------------------


def _check_annotation(ann, where: str, duration: float, num_classes: int) -> dict:
    if not isinstance(ann, dict):
        raise ValidationError(f"{where}: must be an object")
    for key in ("segment", "label"):
        if key not in ann:
            raise ValidationError(f"{where}: missing {key!r}")
    seg = ann["segment"]
    if not isinstance(seg, (list, tuple)) or len(seg) != 2 or not all(
        isinstance(x, (int, float)) and np.isfinite(x) for x in seg
    ):
        raise ValidationError(f"{where}.segment: must be two finite numbers")
    a, b = float(seg[0]), float(seg[1])
    if not 0.0 <= a < b:
        raise ValidationError(f"{where}.segment: needs 0 <= start < end, got [{a}, {b}]")
    if b > duration + 1e-9:
        raise ValidationError(f"{where}.segment: end {b} exceeds video duration {duration}")
    label = ann["label"]
    if isinstance(label, bool) or not isinstance(label, int) or not 0 <= label < num_classes:
        raise ValidationError(f"{where}.label: must be an integer in [0, {num_classes})")
    return {"segment": [a, b], "label": label}


def validate_annotations(obj, origin: str = "annotations") -> tuple[int, dict[str, dict]]:
    """Returns (num_classes, {video_id: {"duration", "annotations"}})."""
    if not isinstance(obj, dict):
        raise ValidationError(f"{origin}: top level must be an object")
    if obj.get("version") != 1:
        raise ValidationError(f"{origin}.version: must be 1, got {obj.get('version')!r}")
    num_classes = obj.get("num_classes")
    if isinstance(num_classes, bool) or not isinstance(num_classes, int) or num_classes < 1:
        raise ValidationError(f"{origin}.num_classes: must be a positive integer")
    videos = obj.get("videos")
    if not isinstance(videos, dict) or not videos:
        raise ValidationError(f"{origin}.videos: must be a non-empty object")
    out = {}
    for vid, entry in videos.items():
        where = f"{origin}.videos[{vid!r}]"
        if not isinstance(entry, dict):
            raise ValidationError(f"{where}: must be an object")
        duration = entry.get("duration")
        if not isinstance(duration, (int, float)) or not np.isfinite(duration) or duration <= 0:
            raise ValidationError(f"{where}.duration: must be a positive number")
        anns = entry.get("annotations")
        if not isinstance(anns, list):
            raise ValidationError(f"{where}.annotations: must be a list")
        cleaned = [
            _check_annotation(a, f"{where}.annotations[{i}]", float(duration), num_classes)
            for i, a in enumerate(anns)
        ]
        out[str(vid)] = {"duration": float(duration), "annotations": cleaned}
    return num_classes, out


def save_dataset(root: str | Path, videos: list[Video], num_classes: int) -> dict:
    """features/<id>.apff plus annotations.json under ``root``."""
    root = Path(root)
    feat_dir = root / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for v in videos:
        save_features(feat_dir / f"{v.video_id}.apff", v)
        index[v.video_id] = {"duration": v.duration, "annotations": v.annotations}
    payload = {"version": 1, "num_classes": num_classes, "videos": index}
    (root / "annotations.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def load_dataset(root: str | Path) -> tuple[int, list[Video]]:
    """Read a dataset directory back; cross-checks headers against the index."""
    root = Path(root)
    ann_path = root / "annotations.json"
    if not ann_path.exists():
        raise DataFormatError(f"{ann_path}: no such file")
    try:
        obj = json.loads(ann_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{ann_path}: not valid JSON: {exc}") from exc
    num_classes, index = validate_annotations(obj, origin=str(ann_path))
    videos = []
    for vid in sorted(index):
        fpath = root / "features" / f"{vid}.apff"
        if not fpath.exists():
            raise DataFormatError(f"{fpath}: feature file missing for video {vid!r}")
        video = load_features(fpath)
        if video.video_id != vid:
            raise ValidationError(
                f"{fpath}: header video_id {video.video_id!r} does not match index entry {vid!r}"
            )
        if abs(video.duration - index[vid]["duration"]) > 1e-9:
            raise ValidationError(
                f"{fpath}: duration {video.duration} disagrees with annotations {index[vid]['duration']}"
            )
        video.annotations = index[vid]["annotations"]
        videos.append(video)
    return num_classes, videos
