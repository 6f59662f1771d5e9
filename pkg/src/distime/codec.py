"""Distribution-based time decoder and encoder.

The decoder maps a hidden state to two softmax distributions over the anchor
bins (start and end) and reads each timestamp out as the anchor-weighted
expectation. The encoder goes the other way: each timestamp becomes a
discretized Gaussian over the same bins, the two vectors are concatenated and
a dense stack projects them to a token embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .core import AnchorGrid, TimeDistribution, TimeSegment, check_embedding, make_segment
from .numerics import DenseStack, Tensor

DEFAULT_REG_MAX = 32
DEFAULT_LAYERS = 3
DEFAULT_DELTA = 1.0


@dataclass
class TimeDecoder:
    stack: DenseStack
    grid: AnchorGrid

    def __post_init__(self):
        if self.stack.out_dim != 2 * self.grid.n_bins:
            raise ValueError("decoder output must be 2 x (reg_max + 1)")

    @classmethod
    def create(cls, d: int, reg_max: int = DEFAULT_REG_MAX, hidden: int | None = None,
               layers: int = DEFAULT_LAYERS, rng=None) -> "TimeDecoder":
        grid = AnchorGrid(reg_max)
        stack = DenseStack.build(d, 2 * grid.n_bins, hidden or d, layers, rng)
        return cls(stack, grid)

    @property
    def d(self) -> int:
        return self.stack.in_dim

    def parameters(self):
        return self.stack.parameters()

    def logits(self, h) -> tuple[Tensor, Tensor]:
        """Start and end logits, each ``(..., reg_max + 1)``."""
        out = self.stack(h)
        n = self.grid.n_bins
        return out[..., :n], out[..., n:]

    def segments(self, h) -> "DecodedSlots":
        """Differentiable decode of a batch of hidden states ``(N, d)``."""
        start_logits, end_logits = self.logits(h)
        anchors = self.grid.anchors
        start = nx.softmax(start_logits) @ anchors
        end = nx.softmax(end_logits) @ anchors
        start, end = order_pair(start, end)
        return DecodedSlots(start, end, start_logits, end_logits)


@dataclass
class DecodedSlots:
    start: Tensor
    end: Tensor
    start_logits: Tensor | None = None
    end_logits: Tensor | None = None

    def to_segments(self) -> list[TimeSegment]:
        return [make_segment(s, e) for s, e in zip(self.start.data, self.end.data)]


def order_pair(start: Tensor, end: Tensor) -> tuple[Tensor, Tensor]:
    """Clamp to [0, 1] and swap reversed pairs, keeping the graph."""
    start = nx.clip(start, 0.0, 1.0)
    end = nx.clip(end, 0.0, 1.0)
    return nx.minimum(start, end), nx.maximum(start, end)


@dataclass
class TimeEncoder:
    stack: DenseStack
    grid: AnchorGrid
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.stack.in_dim != 2 * self.grid.n_bins:
            raise ValueError("encoder input must be 2 x (reg_max + 1)")
        if not self.delta > 0:
            raise ValueError("delta must be positive")

    @classmethod
    def create(cls, d: int, reg_max: int = DEFAULT_REG_MAX, hidden: int | None = None,
               layers: int = DEFAULT_LAYERS, delta: float = DEFAULT_DELTA, rng=None) -> "TimeEncoder":
        grid = AnchorGrid(reg_max)
        stack = DenseStack.build(2 * grid.n_bins, d, hidden or d, layers, rng)
        return cls(stack, grid, delta)

    @property
    def d(self) -> int:
        return self.stack.out_dim

    def parameters(self):
        return self.stack.parameters()

    def distributions(self, starts, ends) -> np.ndarray:
        """Concatenated Gaussian projections, shape ``(N, 2 * (reg_max + 1))``."""
        ps = project_gaussian(np.asarray(starts, dtype=np.float64), self.grid, self.delta)
        pe = project_gaussian(np.asarray(ends, dtype=np.float64), self.grid, self.delta)
        return np.concatenate([ps, pe], axis=-1)

    def embed(self, starts, ends) -> Tensor:
        """Token embeddings ``(N, d)`` for paired start/end times."""
        return self.stack(self.distributions(starts, ends))


def decode_distribution(dec: TimeDecoder, h) -> TimeDistribution:
    h = check_embedding(h, dec.d)
    with nx.no_grad():
        start_logits, end_logits = dec.logits(h)
    return TimeDistribution(nx.softmax_rows(start_logits.data), nx.softmax_rows(end_logits.data))


def expect_timestamps(dist: TimeDistribution, grid: AnchorGrid) -> TimeSegment:
    if dist.n_bins != grid.n_bins:
        raise ValueError(f"distribution has {dist.n_bins} bins, grid has {grid.n_bins}")
    return make_segment(float(dist.start_probs @ grid.anchors), float(dist.end_probs @ grid.anchors))


def project_gaussian(t, grid: AnchorGrid, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Discretized Gaussian centred on ``t`` with spread ``delta`` bin widths.

    The density is evaluated at each anchor and renormalized, so mass that
    would fall outside [0, 1] is folded back onto the grid.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    t = np.asarray(t, dtype=np.float64)
    sigma = delta / grid.reg_max
    z = (grid.anchors - t[..., None]) / sigma
    logp = -0.5 * z * z
    p = np.exp(logp - logp.max(axis=-1, keepdims=True))
    return p / p.sum(axis=-1, keepdims=True)


def encode_token(enc: TimeEncoder, seg: TimeSegment) -> np.ndarray:
    with nx.no_grad():
        return enc.embed([seg.start], [seg.end]).data[0]


def encode_frame_time(enc: TimeEncoder, t: float) -> np.ndarray:
    return encode_token(enc, TimeSegment(t, t))


def codec_to_bytes(dec: TimeDecoder, enc: TimeEncoder) -> bytes:
    return nx.pack_sections([
        ("DEC", nx.stack_to_bytes(dec.stack)),
        ("ENC", nx.stack_to_bytes(enc.stack)),
        ("DLT", nx.tensor_to_bytes(np.array([enc.delta]))),
    ])


def codec_from_bytes(buf: bytes) -> tuple[TimeDecoder, TimeEncoder]:
    sections = dict(nx.unpack_sections(buf))
    dec_stack = nx.stack_from_bytes(sections["DEC"])
    enc_stack = nx.stack_from_bytes(sections["ENC"])
    delta = float(nx.tensor_from_bytes(sections["DLT"])[0])
    grid = AnchorGrid(dec_stack.out_dim // 2 - 1)
    return TimeDecoder(dec_stack, grid), TimeEncoder(enc_stack, grid, delta)
