import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distime.core import make_segment
from distime.ensemble import (CandidateSegment, EmbeddingPair, calibration_curve, calibration_spearman,
                              candidate_record, cosine_score, ensemble_report, estimate_offsets, read_candidates,
                              score_candidates, select_ensemble, simulate_candidates)
from distime.metrics import JsonlError

S = make_segment


def cand(event, model, score, start=0.1):
    return CandidateSegment(event, model, S(start, start + 0.2), score)


def test_cosine_examples():
    v = np.array([1.0, 2.0, -0.5])
    assert cosine_score(EmbeddingPair(v, v)) == pytest.approx(1.0, abs=1e-15)
    assert cosine_score(EmbeddingPair(np.array([1.0, 0]), np.array([0, 3.0]))) == 0.0
    assert cosine_score(EmbeddingPair(v, -v)) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(ValueError):
        EmbeddingPair(np.zeros(3), v)
    with pytest.raises(ValueError):
        EmbeddingPair(np.ones(2), v)


@given(st.floats(0.01, 100), st.floats(0.01, 100), st.integers(0, 1000))
def test_cosine_scale_invariant(a, b, seed):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=5), rng.normal(size=5)
    assert cosine_score(EmbeddingPair(a * u, b * v)) == pytest.approx(cosine_score(EmbeddingPair(u, v)), abs=1e-12)


def test_select_examples():
    only = cand("e", "A", 0.1)
    assert select_ensemble([only])["e"] is only
    c = [cand("e", "A", 0.7), cand("e", "B", 0.9), cand("e", "C", 0.4)]
    assert select_ensemble(c)["e"].model == "B"
    tie = [cand("e", "C", 0.5), cand("e", "A", 0.5), cand("e", "B", 0.5)]
    assert select_ensemble(tie, priority=("A", "B", "C"))["e"].model == "A"
    assert select_ensemble(tie, priority=("B", "A", "C"))["e"].model == "B"
    same_model = [cand("e", "A", 0.5, start=0.4), cand("e", "A", 0.5, start=0.2)]
    assert select_ensemble(same_model)["e"].segment.start == 0.2
    assert select_ensemble(c, offsets={"C": 0.6})["e"].model == "C"


def test_select_requires_scores():
    with pytest.raises(ValueError):
        select_ensemble([CandidateSegment("e", "A", S(0, 1))])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_select_invariant_to_monotone_transform(seed):
    cands, _ = simulate_candidates(30, seed)
    base = select_ensemble(cands)
    warped = [dataclasses.replace(c, score=np.exp(3 * c.score) - 7) for c in cands]
    after = select_ensemble(warped)
    assert {e: (c.model, c.segment) for e, c in base.items()} == {e: (c.model, c.segment) for e, c in after.items()}


def test_score_from_embeddings():
    c = CandidateSegment("e", "A", S(0, 1), None, (1.0, 0.0), (1.0, 1.0))
    assert score_candidates([c])[0].score == pytest.approx(2 ** -0.5)
    with pytest.raises(ValueError):
        score_candidates([CandidateSegment("e", "A", S(0, 1))])


def test_calibration_examples():
    perfect = [CandidateSegment(f"e{i}", "A", S(0.2, 0.4), 1.0) for i in range(5)]
    gts = {f"e{i}": S(0.2, 0.4) for i in range(5)}
    assert calibration_curve(perfect, gts) == [(1.0, 1.0, 5)]

    # IoU equals the score by construction: gt [0, 1], candidate [0, s]
    scores = np.linspace(0.05, 1.0, 40)
    cands = [CandidateSegment(f"e{i}", "A", S(0.0, s), float(s)) for i, s in enumerate(scores)]
    gts = {f"e{i}": S(0.0, 1.0) for i in range(40)}
    curve = calibration_curve(cands, gts, bins=10)
    width = (1.0 - 0.05) / 10
    for centre, miou, n in curve:
        assert centre - width / 2 - 1e-12 <= miou <= centre + width / 2 + 1e-12
    assert sum(n for *_, n in curve) == 40


def test_calibration_oracle_positive_rank_correlation():
    cands, gts = simulate_candidates(300, 4)
    assert calibration_spearman(calibration_curve(cands, gts)) > 0


def test_offsets_examples():
    cands, gts = simulate_candidates(200, 1)
    # same population for each model -> all offsets zero
    mirrored = [dataclasses.replace(c, model=m) for c in cands if c.model == "A" for m in ("A", "B", "C")]
    assert estimate_offsets(mirrored, gts) == {"A": 0.0, "B": 0.0, "C": 0.0}
    shifted = [dataclasses.replace(c, score=c.score + 0.1) if c.model == "B" else c for c in mirrored]
    off = estimate_offsets(shifted, gts)
    assert off["A"] == 0.0 and abs(off["B"] + 0.1) < 0.02 and abs(off["C"]) < 1e-9
    few = [c for c in cands if c.model != "C"] + [c for c in cands if c.model == "C"][:10]
    with pytest.raises(ValueError, match="fewer than 30"):
        estimate_offsets(few, gts)


def test_simulated_ensemble_beats_members():
    cands, gts = simulate_candidates(300, 0)
    report = ensemble_report(cands, gts)
    assert report["ensemble"] >= max(report[m] for m in "ABC") - 0.01


def test_candidate_file_round_trip(tmp_path):
    c = CandidateSegment("e1", "A", S(0.1, 0.3), 0.25, (1.0, 2.0), (0.5, 0.5))
    path = tmp_path / "c.jsonl"
    path.write_text(candidate_record(c) + "\n")
    assert read_candidates(path) == [c]
    path.write_text('{"event_id": "e", "model": "A"}\n')
    with pytest.raises(JsonlError, match=":1:"):
        read_candidates(path)
