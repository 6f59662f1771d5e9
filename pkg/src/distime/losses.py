"""Training objectives: next-token CE, 1-D GIoU regression and distribution focal loss."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .core import AnchorGrid, TimeSegment
from .numerics import Tensor

IGNORE_ID = -100


class EmptyTargetsWarning(UserWarning):
    """Raised (as a warning) when every position of a CE batch is ignored."""


@dataclass(frozen=True)
class LossWeights:
    lambda_ntp: float = 1.0
    lambda_reg: float = 1.0
    lambda_dist: float = 1.0

    def __post_init__(self):
        if min(self.lambda_ntp, self.lambda_reg, self.lambda_dist) < 0:
            raise ValueError("loss weights must be non-negative")


def dfl_bins(targets, grid: AnchorGrid):
    """Left bin index and the two interpolation weights for each target.

    Targets are clamped to [0, 1]. A target sitting on an anchor (to 1e-9 bin
    widths) puts all weight on that anchor.
    """
    y = np.clip(np.asarray(targets, dtype=np.float64), 0.0, 1.0)
    pos = y * grid.reg_max
    snapped = np.round(pos)
    on_anchor = np.abs(pos - snapped) < 1e-9
    pos = np.where(on_anchor, snapped, pos)
    left = np.minimum(np.floor(pos), grid.reg_max - 1).astype(np.int64)
    w_right = pos - left
    w_left = 1.0 - w_right
    return left, w_left, w_right


def dfl(logits, targets, grid: AnchorGrid) -> Tensor:
    """Distribution focal loss, summed over rows.

    ``logits`` is ``(reg_max + 1,)`` or ``(N, reg_max + 1)``; ``targets`` is a
    normalized time or a vector of N of them. Only the two bins bracketing the
    target contribute; zero weights are skipped so a one-hot prediction at
    the target's anchor gives exactly 0.
    """
    logits = nx.as_tensor(logits)
    single = logits.ndim == 1
    if single:
        logits = logits.reshape(1, -1)
    if logits.shape[-1] != grid.n_bins:
        raise ValueError(f"expected {grid.n_bins} logits, got {logits.shape[-1]}")
    left, w_left, w_right = dfl_bins(np.atleast_1d(targets), grid)
    rows = np.arange(logits.shape[0])
    logp = nx.log_softmax(logits, axis=-1)
    total = None
    for bins, w in ((left, w_left), (left + 1, w_right)):
        keep = w > 0
        if not keep.any():
            continue
        term = logp[rows[keep], bins[keep]] * w[keep]
        total = term.sum() if total is None else total + term.sum()
    return -total if total is not None else nx.Tensor(0.0)


def segment_dfl(start_logits, end_logits, segments, grid: AnchorGrid) -> Tensor:
    """DFL of start and end halves against target segments, summed."""
    segments = np.asarray([list(s) for s in segments], dtype=np.float64).reshape(-1, 2)
    return dfl(start_logits, segments[:, 0], grid) + dfl(end_logits, segments[:, 1], grid)


def giou_1d_terms(ps, pe, gs, ge) -> Tensor:
    """Element-wise 1-D GIoU loss ``1 - IoU + (|C| - |union|) / |C|``.

    Inputs are tensors or arrays of matching shape with start <= end. Two
    coincident zero-length segments give 0.
    """
    ps, pe, gs, ge = (nx.as_tensor(v) for v in (ps, pe, gs, ge))
    inter = nx.relu(nx.minimum(pe, ge) - nx.maximum(ps, gs))
    union = (pe - ps) + (ge - gs) - inter
    hull = nx.maximum(pe, ge) - nx.minimum(ps, gs)
    same = (ps.data == gs.data) & (pe.data == ge.data)
    iou = nx.safe_div(inter, union, np.where(same, 1.0, 0.0))
    penalty = nx.safe_div(hull - union, hull, 0.0)
    return 1.0 - iou + penalty


def giou_1d(pred, gt) -> Tensor:
    """GIoU loss of one predicted segment (or a tensor pair) against ``gt``."""
    if isinstance(pred, TimeSegment):
        pred = (pred.start, pred.end)
    if isinstance(gt, TimeSegment):
        gt = (gt.start, gt.end)
    return giou_1d_terms(pred[0], pred[1], gt[0], gt[1])


def ntp_loss(logits, target_ids, ignore_id: int = IGNORE_ID) -> Tensor:
    """Mean next-token cross-entropy over positions whose target is not ignored.

    ``logits`` is ``(..., V)`` and ``target_ids`` the matching integer array.
    With nothing left to score the loss is 0 and an :class:`EmptyTargetsWarning` is issued.
    """
    logits = nx.as_tensor(logits)
    targets = np.asarray(target_ids, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError("logits and targets disagree on positions")
    keep = targets != ignore_id
    if not keep.any():
        warnings.warn("no positions left after ignore mask", EmptyTargetsWarning, stacklevel=2)
        return nx.Tensor(0.0)
    flat = logits.reshape(-1, logits.shape[-1])
    pos = np.flatnonzero(keep.reshape(-1))
    logp = nx.log_softmax(flat[pos], axis=-1)
    picked = logp[np.arange(pos.size), targets.reshape(-1)[pos]]
    return -picked.sum() * (1.0 / pos.size)


def total_loss(ntp, reg, dist, w: LossWeights = LossWeights()):
    return w.lambda_ntp * ntp + w.lambda_reg * reg + w.lambda_dist * dist
