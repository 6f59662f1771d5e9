"""Candidate scoring and ensemble selection across grounding models.

Several grounding models propose a segment for the same event. Each
candidate is scored by the cosine similarity between an embedding of the
trimmed clip and one of the event text; the highest scoring candidate wins.
The helpers below also cover the validation side: a score/IoU calibration
curve, per-model score offsets, and a simulator whose scorer is the true IoU
plus noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .core import TimeSegment, make_segment, segment_iou
from .metrics import JsonlError, read_jsonl

MIN_OFFSET_SAMPLES = 30
OFFSET_TOLERANCE = 0.02


@dataclass(frozen=True)
class CandidateSegment:
    event_id: str
    model: str
    segment: TimeSegment
    score: float | None = None
    visual_emb: tuple | None = None
    text_emb: tuple | None = None


@dataclass(frozen=True)
class EmbeddingPair:
    visual: np.ndarray
    text: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.visual, dtype=np.float64).ravel()
        t = np.asarray(self.text, dtype=np.float64).ravel()
        if v.shape != t.shape:
            raise ValueError("embeddings differ in dimension")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(t))):
            raise ValueError("embeddings must be finite")
        if not np.any(v) or not np.any(t):
            raise ValueError("zero-norm embedding")
        object.__setattr__(self, "visual", v)
        object.__setattr__(self, "text", t)


def cosine_score(pair: EmbeddingPair) -> float:
    u = pair.visual / np.linalg.norm(pair.visual)
    v = pair.text / np.linalg.norm(pair.text)
    return float(np.clip(u @ v, -1.0, 1.0))


def score_candidates(candidates) -> list[CandidateSegment]:
    """Fill in missing scores from the attached embeddings."""
    out = []
    for c in candidates:
        if c.score is None:
            if c.visual_emb is None or c.text_emb is None:
                raise ValueError(f"candidate {c.event_id}/{c.model} has neither score nor embeddings")
            c = replace(c, score=cosine_score(EmbeddingPair(np.asarray(c.visual_emb), np.asarray(c.text_emb))))
        out.append(c)
    return out


def group_by_event(candidates) -> dict[str, list[CandidateSegment]]:
    groups: dict[str, list[CandidateSegment]] = {}
    for c in candidates:
        groups.setdefault(c.event_id, []).append(c)
    return groups


def select_ensemble(candidates, offsets: dict | None = None, priority=None) -> dict[str, CandidateSegment]:
    """Pick, per event, the candidate maximizing ``score + offset[model]``.

    Ties go to the model listed first in ``priority`` (default: model names
    in sorted order), then to the earlier start time.
    """
    offsets = offsets or {}
    groups = candidates if isinstance(candidates, dict) else group_by_event(candidates)
    models = sorted({c.model for cands in groups.values() for c in cands})
    rank = {m: i for i, m in enumerate(priority or models)}
    chosen = {}
    for event, cands in groups.items():
        if not cands:
            raise ValueError(f"event {event!r} has no candidates")
        if any(c.score is None for c in cands):
            raise ValueError(f"event {event!r} has unscored candidates")

        def key(c):
            return (-(c.score + offsets.get(c.model, 0.0)), rank.get(c.model, len(rank)), c.segment.start)

        chosen[event] = min(cands, key=key)
    return chosen


def calibration_curve(candidates, gts: dict, bins: int = 10) -> list[tuple[float, float, int]]:
    """``(bin centre, mean IoU, count)`` over equal-width score bins; empty bins are dropped."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    pts = [(c.score, segment_iou(c.segment, gts[c.event_id])) for c in candidates if c.event_id in gts]
    if not pts:
        raise ValueError("no scored candidates with ground truth")
    scores = np.array([p[0] for p in pts], dtype=np.float64)
    ious = [p[1] for p in pts]
    lo, hi = float(scores.min()), float(scores.max())
    if hi == lo:
        return [(lo, math.fsum(ious) / len(ious), len(ious))]
    width = (hi - lo) / bins
    idx = np.minimum(((scores - lo) / width).astype(np.int64), bins - 1)
    curve = []
    for b in range(bins):
        members = [ious[i] for i in np.flatnonzero(idx == b)]
        if members:
            curve.append((lo + (b + 0.5) * width, math.fsum(members) / len(members), len(members)))
    return curve


def calibration_spearman(curve) -> float:
    if len(curve) < 2:
        return float("nan")
    return float(stats.spearmanr([c[0] for c in curve], [c[1] for c in curve]).statistic)


def estimate_offsets(candidates, gts: dict, tolerance: float = OFFSET_TOLERANCE,
                     min_samples: int = MIN_OFFSET_SAMPLES, reference: str | None = None) -> dict[str, float]:
    """Per-model score offsets from a shared-slope least-squares fit.

    IoU is regressed on score with one slope shared by every model and one
    intercept per model. A model whose intercept is higher than the
    reference's gets a positive offset in score units, ``(a_m - a_ref) / b``.
    If every offset is smaller than ``tolerance`` all offsets are returned as 0.
    """
    by_model: dict[str, list[tuple[float, float]]] = {}
    for c in candidates:
        if c.event_id in gts and c.score is not None:
            by_model.setdefault(c.model, []).append((c.score, segment_iou(c.segment, gts[c.event_id])))
    if not by_model:
        raise ValueError("no scored candidates with ground truth")
    models = sorted(by_model)
    short = [m for m in models if len(by_model[m]) < min_samples]
    if short:
        raise ValueError(f"models with fewer than {min_samples} samples: {', '.join(short)}")
    reference = reference or models[0]
    rows, y = [], []
    for j, m in enumerate(models):
        for score, iou in by_model[m]:
            onehot = [0.0] * len(models)
            onehot[j] = 1.0
            rows.append([score] + onehot)
            y.append(iou)
    coef, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(y), rcond=None)
    slope, intercepts = coef[0], dict(zip(models, coef[1:]))
    if abs(slope) < 1e-12:
        raise ValueError("score carries no information about IoU (zero slope)")
    offsets = {m: float((intercepts[m] - intercepts[reference]) / slope) for m in models}
    if all(abs(v) < tolerance for v in offsets.values()):
        return {m: 0.0 for m in models}
    return offsets


def ensemble_report(candidates, gts: dict, offsets: dict | None = None) -> dict:
    """mIoU of the ensemble choice and of each model alone."""
    chosen = select_ensemble(candidates, offsets)
    report = {"ensemble": math.fsum(segment_iou(c.segment, gts[e]) for e, c in chosen.items()) / len(chosen)}
    groups = group_by_event(candidates)
    for m in sorted({c.model for c in candidates}):
        ious = [segment_iou(c.segment, gts[e]) for e, cands in groups.items() for c in cands if c.model == m]
        report[m] = math.fsum(ious) / len(ious)
    return report


# simulation ------------------------------------------------------------------------------

@dataclass(frozen=True)
class SimulatedModel:
    name: str
    boundary_noise: float
    score_noise: float = 0.05
    score_bias: float = 0.0


DEFAULT_MODELS = (SimulatedModel("A", 0.06), SimulatedModel("B", 0.09), SimulatedModel("C", 0.12))


def simulate_candidates(n_events: int, seed: int, models=DEFAULT_MODELS, min_len: float = 0.1):
    """Oracle-scored candidates: each model jitters the gt boundaries, score = IoU + noise.

    Returns ``(candidates, gts)``.
    """
    rng = np.random.default_rng(seed)
    gts, cands = {}, []
    for i in range(n_events):
        s = rng.uniform(0.0, 1.0 - min_len)
        e = rng.uniform(s + min_len, 1.0)
        gt = make_segment(s, e)
        key = f"e{i:05d}"
        gts[key] = gt
        for m in models:
            seg = make_segment(*(np.array([s, e]) + rng.normal(0.0, m.boundary_noise, 2)))
            score = segment_iou(seg, gt) + m.score_bias + rng.normal(0.0, m.score_noise)
            cands.append(CandidateSegment(key, m.name, seg, float(score)))
    return cands, gts


# files ----------------------------------------------------------------------------------------

def read_candidates(path) -> list[CandidateSegment]:
    out = []
    for lineno, obj in read_jsonl(path):
        try:
            st, et = obj["segment"]
            score = obj.get("score")
            vis, txt = obj.get("visual_emb"), obj.get("text_emb")
            out.append(CandidateSegment(str(obj["event_id"]), str(obj["model"]), make_segment(float(st), float(et)),
                                        None if score is None else float(score),
                                        None if vis is None else tuple(float(x) for x in vis),
                                        None if txt is None else tuple(float(x) for x in txt)))
        except (KeyError, TypeError, ValueError) as exc:
            raise JsonlError(path, lineno, f"bad candidate: {exc}") from None
    return out


def candidate_record(c: CandidateSegment, chosen: bool | None = None) -> str:
    obj = {"event_id": c.event_id, "model": c.model, "segment": [c.segment.start, c.segment.end]}
    if c.visual_emb is not None:
        obj["visual_emb"] = list(c.visual_emb)
    if c.text_emb is not None:
        obj["text_emb"] = list(c.text_emb)
    if c.score is not None:
        obj["score"] = c.score
    if chosen is not None:
        obj["chosen"] = chosen
    return json.dumps(obj)
