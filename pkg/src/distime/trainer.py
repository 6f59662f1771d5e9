"""Deterministic training loop for the toy grounding model.

Three arms are supported:

* ``direct``     - a dense head maps h_time straight to (st, et); L_ntp + L_reg.
* ``dist``       - distribution decoder; L_ntp + L_reg + L_dist.
* ``dist_reenc`` - as ``dist``, and every TIME_STAMP input position carries
  the re-encoded ground-truth segment instead of the raw token embedding.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .losses import LossWeights, giou_1d_terms, ntp_loss, segment_dfl, total_loss
from .metrics import mr_report
from .numerics import Tensor
from .seqmodel import Batch, ModelConfig, ToySeqModel, generate_samples, make_batch
from .synthgen import GroundingSample, SynthConfig, gen_dataset

ARMS = ("direct", "dist", "dist_reenc")
TRACE_HEADER = ("step", "loss", "miou", "r1_03", "r1_05", "r1_07")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 10000
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 0
    arm: str = "dist_reenc"
    reg_max: int = 32
    delta: float = 1.0
    lambda_ntp: float = 1.0
    lambda_reg: float = 1.0
    lambda_dist: float = 1.0
    eval_every: int = 1000
    reencode_source: str = "gt"
    freeze_frame_proj: bool = False
    # model
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    # data (used when the trainer builds its own datasets)
    task: str = "mr"
    n_train: int = 4000
    n_eval: int = 300
    T: int = 16
    K: int = 4
    fuzz_q: float = 0.3

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}")
        if self.reencode_source not in ("gt", "pred"):
            raise ValueError("reencode_source must be 'gt' or 'pred'")
        if self.eval_every < 0 or self.warmup < 0:
            raise ValueError("eval_every and warmup must be non-negative")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_ntp, self.lambda_reg, self.lambda_dist)

    @property
    def reencode(self) -> bool:
        return self.arm == "dist_reenc"

    def model_config(self, d_v: int) -> ModelConfig:
        return ModelConfig(d=self.d, d_v=d_v, K=self.K, n_layers=self.n_layers, n_heads=self.n_heads,
                           reg_max=self.reg_max, delta=self.delta,
                           head="direct" if self.arm == "direct" else "dist", refine=self.reencode)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(T=self.T, K=self.K, fuzz_q=self.fuzz_q, task=self.task)

    def datasets(self) -> tuple[list[GroundingSample], list[GroundingSample]]:
        """Train and held-out sets drawn from disjoint seed streams."""
        sc = self.synth_config()
        return gen_dataset(self.n_train, 2 * self.seed, sc), gen_dataset(self.n_eval, 2 * self.seed + 1, sc)


def _coerce(kind, raw: str):
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments allowed) into a TrainConfig."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(types[key], raw)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def format_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(config).items())


class Adam:
    """Adam with bias correction; state is kept per parameter in list order."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def batch_loss(model: ToySeqModel, batch: Batch, config: TrainConfig) -> Tensor:
    """Full training objective of one batch for the configured arm."""
    reencode = config.reencode
    payload = None
    if reencode and config.reencode_source == "pred" and batch.slot_rows.size:
        # re-encode from the model's own detached decode instead of ground truth
        with nx.no_grad():
            slots = model.forward(batch, False).slots
        payload = np.stack([slots.start.data, slots.end.data], axis=1)
    out = model.forward(batch, reencode, payload)
    w = config.weights
    ntp = ntp_loss(out.logits, batch.targets)
    if not batch.slot_rows.size:
        return w.lambda_ntp * ntp
    gt = batch.slot_segments
    n = len(batch.slot_rows)
    reg = giou_1d_terms(out.slots.start, out.slots.end, gt[:, 0], gt[:, 1]).sum() * (1.0 / n)
    if config.arm == "direct":
        return w.lambda_ntp * ntp + w.lambda_reg * reg
    dist = segment_dfl(out.slots.start_logits, out.slots.end_logits, gt, model.decoder.grid) * (1.0 / n)
    return total_loss(ntp, reg, dist, w)


def batch_order(samples, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """One epoch of batches: seeded shuffle, grouped so prompts share a shape."""
    groups: dict[tuple, list[int]] = {}
    for i in rng.permutation(len(samples)):
        s = samples[int(i)]
        groups.setdefault((s.task, s.frames.shape), []).append(int(i))
    chunks = [idx[lo:lo + batch_size] for _, idx in sorted(groups.items()) for lo in range(0, len(idx), batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def evaluate(model: ToySeqModel, dataset, refine: bool | None = None, max_len: int = 24) -> dict:
    """Greedy-generate on ``dataset`` and score the first emitted segment."""
    gens = generate_samples(model, dataset, max_len=max_len, refine=refine)
    preds, gts = {}, {}
    for s, g in zip(dataset, gens):
        segs = [it for it in g.items if not isinstance(it, (int, np.integer))]
        preds[s.id] = segs[0] if segs else None
        gts[s.id] = list(s.segments)
    return mr_report(preds, gts)


@dataclass
class TrainResult:
    model: ToySeqModel
    trace: list[tuple]
    final: dict

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)


def trace_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for row in rows:
        writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return buf.getvalue()


def train(config: TrainConfig, dataset=None, eval_set=None, log=None) -> TrainResult:
    """Train a fresh model. Returns the model, the metric trace and the final report.

    Without ``dataset`` the train/held-out sets are generated from ``config``.
    A trace row is logged every ``eval_every`` steps and after the last step.
    """
    if dataset is None:
        dataset, generated_eval = config.datasets()
        eval_set = generated_eval if eval_set is None else eval_set
    if not dataset:
        raise ValueError("dataset is empty")
    model = ToySeqModel(config.model_config(dataset[0].frames.shape[1]), seed=config.seed)
    model.freeze_frame_proj = config.freeze_frame_proj
    opt = Adam(model.trainable_parameters(), config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    vocab = model.vocab
    order: list[list[int]] = []
    trace, window = [], []
    report = {}
    for step in range(1, config.steps + 1):
        if not order:
            order = batch_order(dataset, config.batch_size, rng)[::-1]
        batch = make_batch([dataset[i] for i in order.pop()], vocab)
        opt.zero_grad()
        loss = batch_loss(model, batch, config)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        loss.backward()
        lr = config.lr * min(1.0, step / config.warmup) if config.warmup else config.lr
        opt.step(lr)
        window.append(value)
        last = step == config.steps
        if (config.eval_every and step % config.eval_every == 0) or last:
            report = evaluate(model, eval_set, refine=config.reencode) if eval_set else {}
            row = (step, math.fsum(window) / len(window), report.get("miou", math.nan),
                   report.get("r1@0.3", math.nan), report.get("r1@0.5", math.nan), report.get("r1@0.7", math.nan))
            trace.append(row)
            window = []
            if log:
                log(row)
    return TrainResult(model, trace, report)
