import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distime import numerics as nx
from distime.codec import (TimeDecoder, TimeEncoder, codec_from_bytes, codec_to_bytes, decode_distribution,
                           encode_frame_time, encode_token, expect_timestamps, project_gaussian)
from distime.core import AnchorGrid, TimeDistribution, TimeSegment


def one_hot(n, k):
    p = np.zeros(n)
    p[k] = 1.0
    return p


def ref_softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def test_zero_decoder_is_uniform():
    dec = TimeDecoder.create(8, 32, rng=np.random.default_rng(0))
    for w in dec.stack.weights:
        w.data[:] = 0.0
    dist = decode_distribution(dec, np.random.default_rng(1).normal(size=8))
    np.testing.assert_allclose(dist.start_probs, np.full(33, 1 / 33), atol=1e-15)
    np.testing.assert_allclose(dist.end_probs, np.full(33, 1 / 33), atol=1e-15)


def test_saturated_decoder_is_one_hot():
    dec = TimeDecoder.create(4, 32, layers=1, rng=np.random.default_rng(0))
    dec.stack.weights[0].data[:] = 0.0
    dec.stack.biases[0].data[:] = 0.0
    dec.stack.biases[0].data[5] = 1000.0
    dec.stack.biases[0].data[33 + 20] = 1000.0
    dist = decode_distribution(dec, np.ones(4))
    assert np.array_equal(dist.start_probs, one_hot(33, 5))
    assert np.array_equal(dist.end_probs, one_hot(33, 20))


def test_decoder_matches_independent_forward():
    rng = np.random.default_rng(7)
    dec = TimeDecoder.create(16, 32, hidden=24, rng=rng)
    for b in dec.stack.biases:
        b.data = rng.normal(size=b.shape)
    h = rng.normal(size=16)
    dist = decode_distribution(dec, h)
    assert abs(dist.start_probs.sum() - 1) < 1e-12 and abs(dist.end_probs.sum() - 1) < 1e-12
    x = h
    for i, (w, b) in enumerate(zip(dec.stack.weights, dec.stack.biases)):
        x = x @ w.data + b.data
        if i < 2:
            x = np.where(x > 0, x, 0.0)
    np.testing.assert_allclose(dist.start_probs, ref_softmax(x[:33]), rtol=1e-12)
    np.testing.assert_allclose(dist.end_probs, ref_softmax(x[33:]), rtol=1e-12)
    seg = expect_timestamps(dist, dec.grid)
    lo, hi = sorted([ref_softmax(x[:33]) @ (np.arange(33) / 32), ref_softmax(x[33:]) @ (np.arange(33) / 32)])
    assert seg.start == pytest.approx(lo, abs=1e-14) and seg.end == pytest.approx(hi, abs=1e-14)


def test_expectation_examples():
    g = AnchorGrid(32)
    oh = one_hot(33, 16)
    assert expect_timestamps(TimeDistribution(oh, oh), g).as_list() == [0.5, 0.5]
    u = np.full(33, 1 / 33)
    seg = expect_timestamps(TimeDistribution(u, u), g)
    assert abs(seg.start - 0.5) < 1e-12 and abs(seg.end - 0.5) < 1e-12
    half = np.zeros(33)
    half[[0, 32]] = 0.5
    assert expect_timestamps(TimeDistribution(half, oh), g).start == 0.5


def test_expectation_swaps_reversed_pair():
    g = AnchorGrid(8)
    seg = expect_timestamps(TimeDistribution(one_hot(9, 6), one_hot(9, 2)), g)
    assert seg.as_list() == [0.25, 0.75]


@given(st.lists(st.floats(0, 1e3), min_size=17, max_size=17).filter(lambda v: sum(v) > 0),
       st.lists(st.floats(0, 1e3), min_size=17, max_size=17).filter(lambda v: sum(v) > 0))
def test_expectation_in_unit_square(a, b):
    a, b = np.array(a) / sum(a), np.array(b) / sum(b)
    seg = expect_timestamps(TimeDistribution(a, b), AnchorGrid(16))
    assert 0.0 <= seg.start <= seg.end <= 1.0


def test_gaussian_symmetric_at_centre():
    g = AnchorGrid(32)
    p = project_gaussian(0.5, g, 1.0)
    assert np.argmax(p) == 16
    np.testing.assert_allclose(p, p[::-1], atol=1e-15)
    assert abs(p.sum() - 1) < 1e-12


@pytest.mark.parametrize("k", [3, 10, 16, 29])
def test_gaussian_narrow_recovers_anchor(k):
    g = AnchorGrid(32)
    t = g.anchors[k]
    assert abs(project_gaussian(t, g, 0.25) @ g.anchors - t) < 1e-6


def test_gaussian_flat_limit():
    g = AnchorGrid(32)
    assert abs(project_gaussian(0.1, g, 1000.0) @ g.anchors - 0.5) < 1e-3


def test_gaussian_rejects_bad_delta():
    with pytest.raises(ValueError):
        project_gaussian(0.5, AnchorGrid(32), 0.0)


def test_encoder_zero_weights_gives_bias():
    enc = TimeEncoder.create(6, 32, rng=np.random.default_rng(0))
    for w in enc.stack.weights:
        w.data[:] = 0.0
    enc.stack.biases[-1].data = np.arange(6.0)
    for s in (TimeSegment(0.1, 0.2), TimeSegment(0.5, 0.9)):
        assert np.array_equal(encode_token(enc, s), np.arange(6.0))


def test_encoder_matches_independent_reimplementation():
    rng = np.random.default_rng(7)
    enc = TimeEncoder.create(12, 32, hidden=20, rng=rng)
    for b in enc.stack.biases:
        b.data = rng.normal(size=b.shape)
    got = encode_token(enc, TimeSegment(0.25, 0.75))

    def gauss(t):
        sigma = 1.0 / 32
        dens = np.exp(-0.5 * ((np.arange(33) / 32 - t) / sigma) ** 2)
        return dens / dens.sum()

    x = np.concatenate([gauss(0.25), gauss(0.75)])
    for i, (w, b) in enumerate(zip(enc.stack.weights, enc.stack.biases)):
        x = x @ w.data + b.data
        if i < 2:
            x = np.maximum(x, 0.0)
    np.testing.assert_allclose(got, x, rtol=1e-12, atol=1e-14)
    assert np.array_equal(got, encode_token(enc, TimeSegment(0.25, 0.75)))


def test_frame_time_is_point_segment():
    enc = TimeEncoder.create(8, 32, rng=np.random.default_rng(3))
    for t in (0.0, 0.5, 1.0):
        assert np.array_equal(encode_frame_time(enc, t), encode_token(enc, TimeSegment(t, t)))
    d = enc.distributions([0.5], [0.5])[0]
    assert np.array_equal(d[:33], d[33:])


def test_codec_dims_validated():
    with pytest.raises(ValueError):
        TimeDecoder(nx.DenseStack([4, 10]), AnchorGrid(32))
    with pytest.raises(ValueError):
        TimeEncoder(nx.DenseStack([10, 4]), AnchorGrid(32))


def test_codec_round_trip_bytes():
    rng = np.random.default_rng(2)
    dec, enc = TimeDecoder.create(8, 16, rng=rng), TimeEncoder.create(8, 16, delta=2.0, rng=rng)
    dec2, enc2 = codec_from_bytes(codec_to_bytes(dec, enc))
    assert dec2.grid.reg_max == 16 and enc2.delta == 2.0
    h = rng.normal(size=8)
    assert np.array_equal(decode_distribution(dec, h).start_probs, decode_distribution(dec2, h).start_probs)
    s = TimeSegment(0.2, 0.4)
    assert np.array_equal(encode_token(enc, s), encode_token(enc2, s))


@settings(max_examples=25, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 3))
def test_decoder_halves_normalized_for_any_h(scale, seed):
    dec = TimeDecoder.create(8, 32, rng=np.random.default_rng(seed))
    dist = decode_distribution(dec, scale * np.random.default_rng(seed + 10).normal(size=8))
    assert abs(dist.start_probs.sum() - 1) < 1e-12 and abs(dist.end_probs.sum() - 1) < 1e-12
