"""Temporal grounding metrics: R@1@IoU, mIoU, mAP@IoU and DVC temporal F1.

Predictions and ground truth are mappings from sample id to segments. The
evaluation set is defined by the ground truth: a sample that has no
prediction counts as a miss. Means are taken with :func:`math.fsum` so the
result does not depend on sample order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import TimeSegment, make_segment, segment_iou

RECALL_POINTS = np.arange(101) / 100.0


@dataclass(frozen=True)
class MRPrediction:
    id: str
    segment: TimeSegment
    score: float | None = None


@dataclass(frozen=True)
class DVCPrediction:
    id: str
    events: tuple = field(default_factory=tuple)  # (TimeSegment, text) pairs

    @property
    def segments(self) -> list[TimeSegment]:
        return [seg for seg, _ in self.events]


def _as_segment(x) -> TimeSegment:
    return x if isinstance(x, TimeSegment) else make_segment(*x)


def _top1(preds) -> dict:
    """Normalize MR predictions to ``{id: TimeSegment | None}``."""
    if not isinstance(preds, dict):
        return {p.id: p.segment for p in preds}
    out = {}
    for key, value in preds.items():
        if isinstance(value, MRPrediction):
            value = value.segment
        elif isinstance(value, list):
            value = value[0] if value else None
        out[key] = None if value is None else _as_segment(value)
    return out


def _gt_lists(gts) -> dict:
    out = {}
    for key, value in gts.items():
        if isinstance(value, (TimeSegment, tuple)) or (isinstance(value, list) and value
                                                        and not isinstance(value[0], (list, tuple, TimeSegment))):
            value = [value]
        out[key] = [_as_segment(v) for v in value]
    return out


def top1_ious(preds, gts) -> dict:
    """IoU of each sample's top-1 prediction with its best-matching gt segment."""
    top = _top1(preds)
    out = {}
    for key, segs in _gt_lists(gts).items():
        pred = top.get(key)
        out[key] = 0.0 if pred is None or not segs else max(segment_iou(pred, g) for g in segs)
    return out


def recall_at_1(preds, gts, threshold: float) -> float:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    ious = top1_ious(preds, gts)
    if not ious:
        return 0.0
    return sum(v >= threshold for v in ious.values()) / len(ious)


def mean_iou(preds, gts) -> float:
    ious = top1_ious(preds, gts)
    if not ious:
        return 0.0
    return math.fsum(ious.values()) / len(ious)


# mAP ---------------------------------------------------------------------------------

def greedy_detection_hits(segments, scores, gt, threshold: float) -> list[bool]:
    """Walk predictions by descending score, matching each to the best free gt.

    Equal scores keep input order; equal IoUs prefer the lower gt index.
    """
    order = sorted(range(len(segments)), key=lambda i: (-scores[i], i))
    free = [True] * len(gt)
    hits = []
    for i in order:
        best, best_iou = -1, -1.0
        for j, g in enumerate(gt):
            if not free[j]:
                continue
            v = segment_iou(segments[i], g)
            if v >= threshold and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            free[best] = False
        hits.append(best >= 0)
    return hits


def interpolated_ap(hits, n_gt: int) -> float:
    """101-point interpolated average precision of a ranked hit list."""
    if n_gt == 0 or not hits:
        return 0.0
    tp = np.cumsum(np.asarray(hits, dtype=np.float64))
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / n_gt
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    values = np.where(idx < len(hits), envelope[np.minimum(idx, len(hits) - 1)], 0.0)
    return math.fsum(values) / len(RECALL_POINTS)


def _scored(value):
    if isinstance(value, dict):
        segs = [_as_segment(s) for s in value["segments"]]
        scores = value.get("scores")
    else:
        segs, scores = [_as_segment(s) for s, _ in value], [sc for _, sc in value]
    if scores is None:
        scores = [float(len(segs) - i) for i in range(len(segs))]
    if len(scores) != len(segs):
        raise ValueError("scores and segments differ in length")
    return segs, [float(s) for s in scores]


def map_at_iou(scored_preds, gts, threshold: float) -> float:
    """Mean over samples of 101-point interpolated AP at an IoU threshold.

    ``scored_preds`` maps id to ``[(segment, score), ...]`` or to a dict with
    ``segments`` and ``scores``. Samples with neither predictions nor gt are
    skipped; a sample with only one side scores 0.
    """
    gt_lists = _gt_lists(gts)
    aps = []
    for key in sorted(set(gt_lists) | set(scored_preds)):
        gt = gt_lists.get(key, [])
        segs, scores = _scored(scored_preds.get(key, []))
        if not gt and not segs:
            continue
        aps.append(interpolated_ap(greedy_detection_hits(segs, scores, gt, threshold), len(gt)))
    return math.fsum(aps) / len(aps) if aps else 0.0


# DVC F1 ------------------------------------------------------------------------------

def greedy_pair_matching(preds, gts, threshold: float) -> list[tuple[int, int]]:
    """One-to-one matching by descending IoU; ties go to the lower gt then pred index."""
    pairs = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            v = segment_iou(p, g)
            if v >= threshold:
                pairs.append((-v, j, i))
    pairs.sort()
    used_p, used_g, matched = set(), set(), []
    for _, j, i in pairs:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            matched.append((i, j))
    return matched


def _dvc_segments(value) -> list[TimeSegment]:
    if isinstance(value, DVCPrediction):
        return value.segments
    return [_as_segment(v[0] if isinstance(v, tuple) and isinstance(v[0], TimeSegment) else v) for v in value]


def dvc_temporal_f1(preds, gts, threshold: float = 0.5) -> tuple[float, float, float]:
    """Per-sample precision and recall averaged over samples, then their F1.

    Samples with neither predictions nor gt are skipped.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    if not isinstance(preds, dict):
        preds = {p.id: p for p in preds}
    gt_lists = _gt_lists(gts)
    ps, rs = [], []
    for key in sorted(set(gt_lists) | set(preds)):
        gt = gt_lists.get(key, [])
        pr = _dvc_segments(preds.get(key, []))
        if not gt and not pr:
            continue
        n = len(greedy_pair_matching(pr, gt, threshold))
        ps.append(n / len(pr) if pr else 0.0)
        rs.append(n / len(gt) if gt else 0.0)
    if not ps:
        return 0.0, 0.0, 0.0
    p = math.fsum(ps) / len(ps)
    r = math.fsum(rs) / len(rs)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


def mr_report(preds, gts, thresholds=(0.3, 0.5, 0.7)) -> dict:
    report = {f"r1@{t}": recall_at_1(preds, gts, t) for t in thresholds}
    report["miou"] = mean_iou(preds, gts)
    report["n"] = len(gts)
    return report


# files ---------------------------------------------------------------------------------

class JsonlError(ValueError):
    """A malformed line in a JSONL input file."""

    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


def read_jsonl(path):
    """Yield ``(line number, object)`` for every non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise JsonlError(path, lineno, "expected a JSON object")
            yield lineno, obj


def read_segment_file(path) -> dict:
    """Load ``{"id", "segments", "scores"?}`` records into ``{id: {"segments", "scores"}}``."""
    out = {}
    for lineno, obj in read_jsonl(path):
        try:
            key = str(obj["id"])
            segs = [make_segment(float(s), float(e)) for s, e in obj["segments"]]
            scores = obj.get("scores")
            if scores is not None:
                scores = [float(s) for s in scores]
                if len(scores) != len(segs):
                    raise ValueError("scores and segments differ in length")
        except (KeyError, TypeError, ValueError) as exc:
            raise JsonlError(path, lineno, f"bad record: {exc}") from None
        if key in out:
            raise JsonlError(path, lineno, f"duplicate id {key!r}")
        out[key] = {"segments": segs, "scores": scores}
    return out


def segment_record(key: str, segments, scores=None, **extra) -> str:
    obj = {"id": key, "segments": [[s.start, s.end] for s in segments]}
    if scores is not None:
        obj["scores"] = list(scores)
    obj.update(extra)
    return json.dumps(obj)


def file_report(preds: dict, gts: dict, thresholds=(0.3, 0.5, 0.7), task: str = "mr") -> dict:
    """Flat metric report for records loaded with :func:`read_segment_file`."""
    gt_segs = {k: v["segments"] for k, v in gts.items()}
    if task == "dvc":
        report = {}
        for t in thresholds:
            p, r, f1 = dvc_temporal_f1({k: v["segments"] for k, v in preds.items()}, gt_segs, t)
            report.update({f"precision@{t}": p, f"recall@{t}": r, f"f1@{t}": f1})
        report["n"] = len(gt_segs)
        return report
    top = {k: v["segments"][int(np.argmax(v["scores"]))] if v["scores"] else
           (v["segments"][0] if v["segments"] else None) for k, v in preds.items()}
    report = mr_report(top, gt_segs, thresholds)
    for t in thresholds:
        report[f"map@{t}"] = map_at_iou(preds, gt_segs, t)
    return report
