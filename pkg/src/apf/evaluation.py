"""Detection quality scoring: greedy matching, interpolated AP, mAP grid.

Detections are matched per video and class in descending score order; each
one claims the not-yet-claimed ground-truth segment it overlaps best, and
counts as a true positive when that overlap reaches the threshold.  Flags are
pooled across videos per class, precision is interpolated to be monotone, and
AP sums the envelope at each recall step.  mAP averages classes that actually
have ground truth; a final mean runs over the threshold grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, ValidationError
from .matching import tiou_pairwise

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.3, 0.71, 0.1), 10))


def threshold_key(threshold: float) -> str:
    return f"{threshold:.2f}"


def sort_detections(dets: list[dict]) -> list[dict]:
    """Score descending; ties break on earlier start, then input order."""
    keys = np.array([(-d["score"], d["segment"][0]) for d in dets]) if dets else np.zeros((0, 2))
    order = np.lexsort((np.arange(len(dets)), keys[:, 1], keys[:, 0])) if dets else []
    return [dets[i] for i in order]


def greedy_video_flags(dets: list[dict], gt_segments: np.ndarray, threshold: float) -> np.ndarray:
    """True-positive flag per detection (already sorted), consuming matches."""
    flags = np.zeros(len(dets), dtype=bool)
    if len(dets) == 0:
        return flags
    if gt_segments.size == 0:
        return flags
    taken = np.zeros(len(gt_segments), dtype=bool)
    segs = np.array([d["segment"] for d in dets], dtype=np.float64)
    overlap = tiou_pairwise(segs, gt_segments)
    for i in range(len(dets)):
        row = overlap[i].copy()
        row[taken] = -1.0
        j = int(np.argmax(row))  # ties resolve to the lowest index
        if row[j] >= threshold:
            flags[i] = True
            taken[j] = True
    return flags


def average_precision(scores: np.ndarray, flags: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP from pooled detection flags."""
    if num_gt <= 0 or len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    flags = np.asarray(flags, dtype=bool)[order]
    tp_cum = np.cumsum(flags)
    precision = tp_cum / np.arange(1, len(flags) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[flags].sum() / num_gt)


@dataclass
class EvalReport:
    thresholds: list[float]
    classes: list[int]
    num_gt: dict[int, int]
    ap: dict[str, dict[int, float]] = field(default_factory=dict)
    map_per_threshold: dict[str, float] = field(default_factory=dict)
    mean_map: float = 0.0

    def to_dict(self) -> dict:
        return {
            "thresholds": [float(t) for t in self.thresholds],
            "classes": [int(c) for c in self.classes],
            "num_gt": {str(c): int(n) for c, n in self.num_gt.items()},
            "ap": {k: {str(c): v for c, v in row.items()} for k, row in self.ap.items()},
            "map_per_threshold": dict(self.map_per_threshold),
            "mean_map": self.mean_map,
        }


def evaluate(
    ground_truth: dict[str, list[dict]],
    detections: dict[str, list[dict]],
    thresholds=DEFAULT_THRESHOLDS,
) -> EvalReport:
    """Score detections against ground truth.

    ``ground_truth``: video id -> [{"segment": [s, e], "label": int}, ...].
    ``detections``: same layout plus a "score" per entry.  Detections for
    videos absent from the ground truth still pool in as false positives.
    Classes without any ground truth report AP 0 and stay out of the mean.
    """
    classes = sorted(
        {int(a["label"]) for anns in ground_truth.values() for a in anns}
        | {int(d["label"]) for dets in detections.values() for d in dets}
    )
    num_gt = {
        c: sum(1 for anns in ground_truth.values() for a in anns if int(a["label"]) == c)
        for c in classes
    }
    videos = sorted(set(ground_truth) | set(detections))
    by_video_class: dict[tuple[str, int], list[dict]] = {}
    for vid in videos:
        for det in detections.get(vid, []):
            by_video_class.setdefault((vid, int(det["label"])), []).append(det)

    report = EvalReport(thresholds=[float(t) for t in thresholds], classes=classes, num_gt=num_gt)
    for threshold in thresholds:
        key = threshold_key(threshold)
        report.ap[key] = {}
        for c in classes:
            pooled_scores: list[float] = []
            pooled_flags: list[np.ndarray] = []
            for vid in videos:
                dets = sort_detections(by_video_class.get((vid, c), []))
                gt_rows = np.array(
                    [a["segment"] for a in ground_truth.get(vid, []) if int(a["label"]) == c],
                    dtype=np.float64,
                ).reshape(-1, 2)
                flags = greedy_video_flags(dets, gt_rows, float(threshold))
                pooled_scores.extend(d["score"] for d in dets)
                pooled_flags.append(flags)
            flags_all = np.concatenate(pooled_flags) if pooled_flags else np.zeros(0, dtype=bool)
            report.ap[key][c] = average_precision(np.array(pooled_scores), flags_all, num_gt[c])
        with_gt = [c for c in classes if num_gt[c] > 0]
        report.map_per_threshold[key] = (
            float(np.mean([report.ap[key][c] for c in with_gt])) if with_gt else 0.0
        )
    report.mean_map = (
        float(np.mean(list(report.map_per_threshold.values()))) if report.map_per_threshold else 0.0
    )
    return report


def nms_1d(dets: list[dict], iou_threshold: float) -> list[dict]:
    """Greedy suppression per class: drop detections overlapping a kept one."""
    kept: list[dict] = []
    by_class: dict[int, list[dict]] = {}
    for det in dets:
        by_class.setdefault(int(det["label"]), []).append(det)
    for c in sorted(by_class):
        chosen: list[dict] = []
        for det in sort_detections(by_class[c]):
            seg = np.array([det["segment"]], dtype=np.float64)
            if all(
                tiou_pairwise(seg, np.array([k["segment"]]))[0, 0] <= iou_threshold for k in chosen
            ):
                chosen.append(det)
        kept.extend(chosen)
    return kept


# --- detection file format ---------------------------------------------------


def validate_detections(obj: dict, origin: str = "detections") -> dict[str, list[dict]]:
    if not isinstance(obj, dict) or "results" not in obj:
        raise ValidationError(f"{origin}: top level must be an object with a 'results' key")
    results = obj["results"]
    if not isinstance(results, dict):
        raise ValidationError(f"{origin}.results: must map video ids to detection lists")
    out: dict[str, list[dict]] = {}
    for vid, dets in results.items():
        if not isinstance(dets, list):
            raise ValidationError(f"{origin}.results[{vid!r}]: must be a list")
        rows = []
        for i, det in enumerate(dets):
            where = f"{origin}.results[{vid!r}][{i}]"
            if not isinstance(det, dict):
                raise ValidationError(f"{where}: must be an object")
            for key in ("segment", "label", "score"):
                if key not in det:
                    raise ValidationError(f"{where}: missing {key!r}")
            seg = det["segment"]
            if (
                not isinstance(seg, (list, tuple))
                or len(seg) != 2
                or not all(isinstance(x, (int, float)) for x in seg)
            ):
                raise ValidationError(f"{where}.segment: must be two numbers")
            if not float(seg[0]) <= float(seg[1]):
                raise ValidationError(f"{where}.segment: start {seg[0]} exceeds end {seg[1]}")
            if not isinstance(det["label"], int) or det["label"] < 0:
                raise ValidationError(f"{where}.label: must be a non-negative integer")
            score = det["score"]
            if not isinstance(score, (int, float)) or not np.isfinite(score):
                raise ValidationError(f"{where}.score: must be a finite number")
            rows.append(
                {"segment": [float(seg[0]), float(seg[1])], "label": int(det["label"]), "score": float(score)}
            )
        out[str(vid)] = rows
    return out


def load_detections(path: str | Path) -> dict[str, list[dict]]:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON: {exc}") from exc
    return validate_detections(obj, origin=str(path))


def save_detections(path: str | Path, results: dict[str, list[dict]]) -> None:
    payload = {"results": results}
    validate_detections(payload)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
