"""Shared value types: normalized times, segments, anchor grids, distributions.

All time values inside the package live on the normalized [0, 1] axis
(fraction of video duration). Conversion to seconds happens only when
answers are rendered for humans.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def normalized_time(value: float) -> float:
    """Validate a normalized timestamp and return it as a float."""
    value = float(value)
    if not math.isfinite(value) or not 0.0 <= value <= 1.0:
        raise ValueError(f"normalized time must lie in [0, 1], got {value!r}")
    return value


@dataclass(frozen=True)
class TimeSegment:
    start: float
    end: float

    def __post_init__(self):
        s, e = normalized_time(self.start), normalized_time(self.end)
        if s > e:
            raise ValueError(f"segment start {s} exceeds end {e}")
        object.__setattr__(self, "start", s)
        object.__setattr__(self, "end", e)

    @property
    def length(self) -> float:
        return self.end - self.start

    def as_list(self) -> list[float]:
        return [self.start, self.end]

    def __iter__(self):
        yield self.start
        yield self.end


def make_segment(start: float, end: float) -> TimeSegment:
    """Build a segment, clamping both ends to [0, 1] and swapping if reversed."""
    start, end = float(start), float(end)
    if not (math.isfinite(start) and math.isfinite(end)):
        raise ValueError(f"segment endpoints must be finite, got ({start!r}, {end!r})")
    start = min(max(start, 0.0), 1.0)
    end = min(max(end, 0.0), 1.0)
    if start > end:
        start, end = end, start
    return TimeSegment(start, end)


def segment_iou(a: TimeSegment, b: TimeSegment) -> float:
    """Temporal IoU of two segments.

    Two zero-length segments give 1.0 when they coincide and 0.0 otherwise.
    """
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    if union <= 0.0:
        return 1.0 if (a.start == b.start and a.end == b.end) else 0.0
    return inter / union


@dataclass(frozen=True)
class AnchorGrid:
    """Fixed anchors ``i / reg_max`` for ``i = 0..reg_max``."""

    reg_max: int = 32
    anchors: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.reg_max) != self.reg_max or self.reg_max < 1:
            raise ValueError(f"reg_max must be a positive integer, got {self.reg_max!r}")
        object.__setattr__(self, "reg_max", int(self.reg_max))
        anchors = np.arange(self.reg_max + 1, dtype=np.float64) / self.reg_max
        anchors.setflags(write=False)
        object.__setattr__(self, "anchors", anchors)

    @property
    def n_bins(self) -> int:
        return self.reg_max + 1


@dataclass(frozen=True)
class TimeDistribution:
    """Start/end probability vectors over the anchor bins."""

    start_probs: np.ndarray
    end_probs: np.ndarray

    def __post_init__(self):
        for name in ("start_probs", "end_probs"):
            p = np.array(getattr(self, name), dtype=np.float64)
            if p.ndim != 1:
                raise ValueError(f"{name} must be a vector")
            if np.any(p < 0) or not np.all(np.isfinite(p)):
                raise ValueError(f"{name} must be finite and non-negative")
            if abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must sum to 1, got {p.sum()!r}")
            p.setflags(write=False)
            object.__setattr__(self, name, p)
        if self.start_probs.shape != self.end_probs.shape:
            raise ValueError("start and end distributions differ in length")

    @property
    def n_bins(self) -> int:
        return self.start_probs.shape[0]


def check_embedding(values, dim: int | None = None) -> np.ndarray:
    """Validate a hidden or time-token embedding vector."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("embedding must be a vector")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"embedding has length {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding has non-finite entries")
    return v
