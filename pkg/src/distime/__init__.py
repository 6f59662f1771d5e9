"""Single-token continuous time representation for temporal grounding.

A ``<TIME_STAMP>`` token's hidden state is decoded into start/end probability
distributions over anchor bins and read out as their expectation; decoded
segments are re-encoded as Gaussian-smoothed distributions and projected back
into the token stream.
"""
from .codec import TimeDecoder, TimeEncoder, decode_distribution, encode_frame_time, encode_token, expect_timestamps, project_gaussian
from .core import AnchorGrid, TimeDistribution, TimeSegment, make_segment, segment_iou
from .losses import dfl, giou_1d, ntp_loss, total_loss

__all__ = [
    "AnchorGrid", "TimeDistribution", "TimeSegment", "make_segment", "segment_iou",
    "TimeDecoder", "TimeEncoder", "decode_distribution", "expect_timestamps", "project_gaussian",
    "encode_token", "encode_frame_time", "dfl", "giou_1d", "ntp_loss", "total_loss",
]
__version__ = "0.1.0"
