import itertools

import numpy as np
import pytest

from distime import numerics as nx
from distime import trainer
from distime.core import make_segment, segment_iou
from distime.seqmodel import Generation, ToySeqModel, make_batch
from distime.synthgen import SynthConfig, gen_dataset
from distime.trainer import (TRACE_HEADER, Adam, TrainConfig, TrainingDiverged, batch_loss, evaluate, format_config,
                             parse_config, train, trace_to_csv)


def tiny(**kw):
    base = dict(steps=20, eval_every=10, n_train=64, n_eval=16, batch_size=8)
    base.update(kw)
    return TrainConfig(**base)


def test_config_preconditions():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(arm="nope")


def test_parse_config_round_trip():
    cfg = TrainConfig(seed=5, arm="dist", delta=0.5, freeze_frame_proj=True)
    assert parse_config(format_config(cfg)) == cfg
    text = "# comment\nsteps = 7\narm = direct  # trailing\nreg-max = 16\n"
    cfg = parse_config(text, seed=9, arm=None)
    assert (cfg.steps, cfg.arm, cfg.reg_max, cfg.seed) == (7, "direct", 16, 9)
    with pytest.raises(ValueError, match="line 1"):
        parse_config("bogus = 1")
    with pytest.raises(ValueError, match="line 2"):
        parse_config("steps = 3\nlr\n")


def test_adam_first_step_is_lr_sign():
    from distime.numerics import parameter
    p = parameter(np.array([1.0, -2.0, 3.0]))
    p.grad = np.array([0.5, -4.0, 0.0])
    Adam([p], lr=0.1).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-6)


def test_same_config_same_trace():
    a, b = train(tiny()), train(tiny())
    assert a.trace_csv() == b.trace_csv()
    assert a.model.to_bytes() == b.model.to_bytes()
    assert a.trace_csv() != train(tiny(seed=1)).trace_csv()


def test_trace_format():
    result = train(tiny(steps=25))
    lines = result.trace_csv().splitlines()
    assert lines[0] == ",".join(TRACE_HEADER) == "step,loss,miou,r1_03,r1_05,r1_07"
    assert [int(l.split(",")[0]) for l in lines[1:]] == [10, 20, 25]
    assert all(np.isfinite(r[1]) for r in result.trace)
    assert trace_to_csv([]) == "step,loss,miou,r1_03,r1_05,r1_07\n"


@pytest.mark.parametrize("arm", ["direct", "dist", "dist_reenc"])
def test_arms_train(arm):
    result = train(tiny(arm=arm, steps=5))
    assert (result.model.direct is not None) == (arm == "direct")
    assert result.model.config.refine == (arm == "dist_reenc")


@pytest.mark.parametrize("arm", ["direct", "dist", "dist_reenc"])
def test_loss_gradient_within_difference_resolution(arm):
    # a loss near 12 evaluated in float64 leaves central differences with step
    # 1e-5 an absolute resolution of a few 1e-10, hence the 1e-9 floor
    cfg = TrainConfig(seed=4, arm=arm)
    batch = make_batch(gen_dataset(8, 1004, cfg.synth_config()), ToySeqModel(cfg.model_config(16)).vocab)
    model = ToySeqModel(cfg.model_config(16), seed=4)
    records = []
    nx.finite_difference_check(model, lambda: batch_loss(model, batch, cfg), n_coords=60, seed=4, records=records)
    for _, _, analytic, numeric, _ in records:
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-9


def test_reencode_from_predictions_flag():
    result = train(tiny(steps=5, reencode_source="pred"))
    assert np.isfinite(result.trace[-1][1])


def test_divergence_reports_step():
    data = gen_dataset(8, 0, SynthConfig())
    data[3].frames[:] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(tiny(batch_size=1, steps=20), data, data[:2])
    assert 1 <= info.value.step <= 8


def test_frozen_frame_projector():
    cfg = tiny(steps=5, freeze_frame_proj=True)
    ref = ToySeqModel(cfg.model_config(16), seed=cfg.seed)
    result = train(cfg)
    for a, b in zip(ref.frame_proj.parameters(), result.model.frame_proj.parameters()):
        assert np.array_equal(a.data, b.data)
    assert not np.array_equal(ref.tok_emb.data, result.model.tok_emb.data)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(tiny(), [], [])


def test_evaluate_perfect_stub(monkeypatch):
    data = gen_dataset(12, 1, SynthConfig())
    monkeypatch.setattr(trainer, "generate_samples",
                        lambda model, samples, **kw: [Generation([5, s.segments[0], 7]) for s in samples])
    report = evaluate(None, data)
    assert report == {"r1@0.3": 1.0, "r1@0.5": 1.0, "r1@0.7": 1.0, "miou": 1.0, "n": 12}


def best_constant_guess_miou(cfg: SynthConfig, grid: int = 60) -> float:
    """Exact expected IoU of the best fixed guess under the MR span distribution."""
    spans = []
    for L in range(cfg.min_len, cfg.max_len + 1):
        starts = range(cfg.T - L + 1)
        for s in starts:
            # length uniform, then start uniform given the length
            spans.append((make_segment(s / (cfg.T - 1), (s + L - 1) / (cfg.T - 1)),
                          1.0 / ((cfg.max_len - cfg.min_len + 1) * len(starts))))
    best = 0.0
    for a, b in itertools.combinations_with_replacement(range(grid + 1), 2):
        guess = make_segment(a / grid, b / grid)
        best = max(best, sum(w * segment_iou(guess, g) for g, w in spans))
    return best


def test_untrained_model_is_no_better_than_a_fixed_guess(short_run):
    config, result = short_run
    baseline = best_constant_guess_miou(config.synth_config())
    assert 0.2 < baseline < 0.5
    _, held_out = config.datasets()
    untrained = ToySeqModel(config.model_config(16), seed=config.seed)
    assert evaluate(untrained, held_out, refine=True)["miou"] <= baseline + 0.05
    assert result.final["miou"] > baseline + 0.1
