"""A tiny causal sequence model with a single time token.

Layout of one input sequence::

    tau_1, v_1, ..., tau_T, v_T, q_1 .. q_N, a_1 .. a_M

``tau_i`` is the time encoder's embedding of frame time ``t_i`` (start = end),
``v_i`` the projected frame feature, ``q`` the query tokens and ``a`` the
answer tokens. The hidden state at the position that *emits* ``<TIME_STAMP>``
is decoded into a segment; the input at the ``<TIME_STAMP>`` position is
either the raw token embedding or, with re-encoding, the encoder's embedding
of that segment.

Each mixing layer is: token shift (position p also sees p - 1), causal
multi-head attention and a ReLU MLP, all residual, with RMS normalisation.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .codec import DecodedSlots, TimeDecoder, TimeEncoder, order_pair
from .core import TimeSegment, make_segment
from .losses import IGNORE_ID
from .numerics import DenseStack, Tensor, parameter
from .synthgen import (DEFAULT_BANK, TIME_MARKER, GroundingSample, TemplateBank, format_span,
                       pattern_name, tokenize_answer)

PAD, EOS, TIME_STAMP = "<pad>", "<eos>", TIME_MARKER


class Vocabulary:
    """Token table: specials, instruction ids, pattern words, answer words, numerals.

    ``<TIME_STAMP>`` always has id 2.
    """

    def __init__(self, K: int, bank: TemplateBank = DEFAULT_BANK):
        words = sorted({w.lower() for a in bank.mr_answers for w in tokenize_answer(a) if w.isalpha()})
        self.tokens = ([PAD, EOS, TIME_STAMP]
                       + [f"<mr_{i}>" for i in range(len(bank.mr_instructions))]
                       + [f"<dvc_{i}>" for i in range(len(bank.dvc_instructions))]
                       + [pattern_name(k) for k in range(K)]
                       + words + [".", ","]
                       + [str(i) for i in range(10)] + ["s", "-"])
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")
        self.K = K
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def time_id(self) -> int:
        return 2

    def encode(self, words) -> list[int]:
        return [self.index[w if w == TIME_STAMP else w.lower()] for w in words]

    def query_ids(self, sample: GroundingSample) -> list[int]:
        if sample.task == "mr":
            return [self.index[f"<mr_{sample.template}>"], self.index[pattern_name(sample.query)]]
        return [self.index[f"<dvc_{sample.template}>"]]

    def answer_ids(self, sample: GroundingSample) -> list[int]:
        """Answer token ids (no trailing EOS)."""
        return self.encode(tokenize_answer(sample.answer_template))

    def render(self, items, duration: float | None = None) -> str:
        """Turn generated ids and segments into display text."""
        out = ""
        for item in items:
            if isinstance(item, TimeSegment):
                word = format_span(item, duration) if duration else f"[{item.start:.4f}, {item.end:.4f}]"
            else:
                word = self.tokens[item]
            if word in (".", ",") or not out:
                out += word
            else:
                out += " " + word
        return out[:1].upper() + out[1:]


# sequences -------------------------------------------------------------------------

@dataclass
class FrameToken:
    features: np.ndarray
    t: float


@dataclass
class QueryToken:
    id: int


@dataclass
class AnswerToken:
    id: int


@dataclass
class TimeStampSlot:
    segment: TimeSegment


@dataclass
class InputSequence:
    items: list

    def __post_init__(self):
        times = [it.t for it in self.items if isinstance(it, FrameToken)]
        if not times:
            raise ValueError("a sequence needs at least one frame")
        if any(b < a for a, b in zip(times, times[1:])) or min(times) < 0 or max(times) > 1:
            raise ValueError("frame timestamps must be non-decreasing within [0, 1]")

    @classmethod
    def build(cls, frames, times, query_ids, answer=()) -> "InputSequence":
        items = [FrameToken(np.asarray(f, dtype=np.float64), float(t)) for f, t in zip(frames, times)]
        items += [QueryToken(int(q)) for q in query_ids]
        items += list(answer)
        return cls(items)

    @classmethod
    def from_sample(cls, sample: GroundingSample, vocab: Vocabulary, with_answer: bool = True) -> "InputSequence":
        answer = []
        if with_answer:
            segs = iter(sample.segments)
            for i in vocab.answer_ids(sample):
                answer.append(TimeStampSlot(next(segs)) if i == vocab.time_id else AnswerToken(i))
        return cls.build(sample.frames, sample.timestamps, vocab.query_ids(sample), answer)


@dataclass
class Batch:
    """Padded, model-ready arrays for B sequences sharing T and N."""

    frames: np.ndarray          # (B, T, d_v)
    times: np.ndarray           # (B, T)
    query_ids: np.ndarray       # (B, N)
    answer_ids: np.ndarray      # (B, M) input ids, PAD-filled
    targets: np.ndarray         # (B, 2T + N + M) next-token targets or IGNORE_ID
    slot_rows: np.ndarray       # (S,) batch row of each TIME_STAMP
    slot_pos: np.ndarray        # (S,) input position of each TIME_STAMP
    slot_segments: np.ndarray   # (S, 2) segment payloads

    @property
    def prompt_len(self) -> int:
        return 2 * self.frames.shape[1] + self.query_ids.shape[1]


def make_batch(sequences, vocab: Vocabulary) -> Batch:
    """Pack InputSequences (or GroundingSamples) into one batch."""
    seqs = [InputSequence.from_sample(s, vocab) if isinstance(s, GroundingSample) else s for s in sequences]
    frames, times, queries, answers = [], [], [], []
    for seq in seqs:
        fr = [it for it in seq.items if isinstance(it, FrameToken)]
        frames.append(np.stack([f.features for f in fr]))
        times.append([f.t for f in fr])
        queries.append([it.id for it in seq.items if isinstance(it, QueryToken)])
        answers.append([it for it in seq.items if isinstance(it, (AnswerToken, TimeStampSlot))])
    if len({f.shape for f in frames}) != 1 or len({len(q) for q in queries}) != 1:
        raise ValueError("sequences in a batch must share frame count, width and query length")
    B, T, N = len(seqs), frames[0].shape[0], len(queries[0])
    P = 2 * T + N
    M = max(len(a) for a in answers)
    answer_ids = np.full((B, M), vocab.pad_id, dtype=np.int64)
    targets = np.full((B, P + M), IGNORE_ID, dtype=np.int64)
    rows, pos, segs = [], [], []
    for b, ans in enumerate(answers):
        for j, it in enumerate(ans):
            tok = vocab.time_id if isinstance(it, TimeStampSlot) else it.id
            answer_ids[b, j] = tok
            targets[b, P - 1 + j] = tok
            if isinstance(it, TimeStampSlot):
                rows.append(b)
                pos.append(P + j)
                segs.append([it.segment.start, it.segment.end])
        if ans:
            targets[b, P - 1 + len(ans)] = vocab.eos_id
    return Batch(
        frames=np.asarray(frames, dtype=np.float64),
        times=np.asarray(times, dtype=np.float64),
        query_ids=np.asarray(queries, dtype=np.int64).reshape(B, N),
        answer_ids=answer_ids,
        targets=targets,
        slot_rows=np.asarray(rows, dtype=np.int64),
        slot_pos=np.asarray(pos, dtype=np.int64),
        slot_segments=np.asarray(segs, dtype=np.float64).reshape(-1, 2),
    )


# model ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    d_v: int = 16
    K: int = 4
    n_layers: int = 2
    n_heads: int = 4
    mlp_hidden: int = 128
    reg_max: int = 32
    codec_layers: int = 3
    codec_hidden: int = 64
    delta: float = 1.0
    head: str = "dist"
    refine: bool = False

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")
        if self.head not in ("dist", "direct"):
            raise ValueError(f"unknown head {self.head!r}")


class Block:
    def __init__(self, d: int, n_heads: int, mlp_hidden: int, rng):
        self.n_heads = n_heads
        self.shift_gain = parameter(np.full(d, 0.5))
        self.g_attn = parameter(np.ones(d))
        self.w_qkv = parameter(nx.glorot_uniform(rng, d, 3 * d))
        self.w_out = parameter(nx.glorot_uniform(rng, d, d))
        self.g_mlp = parameter(np.ones(d))
        self.mlp = DenseStack([d, mlp_hidden, d], rng)

    def parameters(self):
        return [self.shift_gain, self.g_attn, self.w_qkv, self.w_out, self.g_mlp] + self.mlp.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        B, S, d = x.shape
        H = self.n_heads
        dh = d // H
        prev = nx.concat([Tensor(np.zeros((B, 1, d))), x[:, :-1]], axis=1)
        x = x + prev * self.shift_gain
        h = nx.rms_norm(x, self.g_attn)
        qkv = (h @ self.w_qkv).reshape(B, S, 3, H, dh).transpose(2, 0, 3, 1, 4)
        att = nx.causal_attention(qkv[0], qkv[1], qkv[2])
        x = x + att.transpose(0, 2, 1, 3).reshape(B, S, d) @ self.w_out
        return x + self.mlp(nx.rms_norm(x, self.g_mlp))


@dataclass
class ForwardOutput:
    hidden: Tensor
    logits: Tensor
    slots: DecodedSlots
    embeddings: Tensor = field(repr=False, default=None)


class ToySeqModel:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, vocab: Vocabulary | None = None):
        self.config = c = config
        self.vocab = vocab or Vocabulary(c.K)
        rng = np.random.default_rng(seed)
        self.frame_proj = DenseStack([c.d_v, c.d], rng)
        self.tok_emb = parameter(rng.normal(scale=1.0 / np.sqrt(c.d), size=(len(self.vocab), c.d)))
        self.blocks = [Block(c.d, c.n_heads, c.mlp_hidden, rng) for _ in range(c.n_layers)]
        self.g_final = parameter(np.ones(c.d))
        self.head = DenseStack([c.d, len(self.vocab)], rng)
        self.decoder = TimeDecoder.create(c.d, c.reg_max, c.codec_hidden, c.codec_layers, rng)
        self.encoder = TimeEncoder.create(c.d, c.reg_max, c.codec_hidden, c.codec_layers, c.delta, rng)
        self.direct = DenseStack([c.d, 2], rng) if c.head == "direct" else None
        self.freeze_frame_proj = False

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [("frame_proj", p) for p in self.frame_proj.parameters()]
        named.append(("tok_emb", self.tok_emb))
        for i, blk in enumerate(self.blocks):
            named += [(f"block{i}", p) for p in blk.parameters()]
        named.append(("g_final", self.g_final))
        named += [("head", p) for p in self.head.parameters()]
        named += [("decoder", p) for p in self.decoder.parameters()]
        named += [("encoder", p) for p in self.encoder.parameters()]
        if self.direct is not None:
            named += [("direct", p) for p in self.direct.parameters()]
        return named

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        frozen = {id(p) for p in self.frame_proj.parameters()} if self.freeze_frame_proj else set()
        return [p for p in self.parameters() if id(p) not in frozen]

    # embeddings -------------------------------------------------------------------
    def frame_time_tokens(self, times: np.ndarray) -> Tensor:
        """``(B, T, d)`` time-token embeddings of frame times (start = end)."""
        B, T = times.shape
        if np.all(times == times[0]):
            tau = self.encoder.embed(times[0], times[0])
            return nx.broadcast_to(tau, (B, T, self.config.d))
        return self.encoder.embed(times.ravel(), times.ravel()).reshape(B, T, self.config.d)

    def embed_prompt(self, frames: np.ndarray, times: np.ndarray, query_ids: np.ndarray) -> Tensor:
        B, T, _ = frames.shape
        tau = self.frame_time_tokens(times)
        v = self.frame_proj(frames)
        interleaved = nx.stack([tau, v], axis=2).reshape(B, 2 * T, self.config.d)
        q = nx.embedding(self.tok_emb, query_ids)
        return nx.concat([interleaved, q], axis=1)

    def embed_answer(self, batch: Batch, reencode: bool, segments=None) -> Tensor:
        """Answer embeddings; with ``reencode`` each slot carries ``segments`` (default: ground truth)."""
        a = nx.embedding(self.tok_emb, batch.answer_ids)
        if reencode and batch.slot_rows.size:
            P = batch.prompt_len
            segs = batch.slot_segments if segments is None else np.asarray(segments, dtype=np.float64)
            tau = self.encoder.embed(segs[:, 0], segs[:, 1])
            a = nx.put(a, (batch.slot_rows, batch.slot_pos - P), tau)
        return a

    def compose(self, batch: Batch, reencode: bool = False, segments=None) -> Tensor:
        prompt = self.embed_prompt(batch.frames, batch.times, batch.query_ids)
        if batch.answer_ids.shape[1] == 0:
            return prompt
        return nx.concat([prompt, self.embed_answer(batch, reencode, segments)], axis=1)

    # core -----------------------------------------------------------------------------
    def hidden(self, x: Tensor) -> Tensor:
        x = nx.as_tensor(x)
        for blk in self.blocks:
            x = blk(x)
        return nx.rms_norm(x, self.g_final)

    def logits(self, h: Tensor) -> Tensor:
        return self.head(h)

    def decode_slots(self, h_time: Tensor) -> DecodedSlots:
        if self.direct is not None:
            out = nx.sigmoid(self.direct(h_time))
            start, end = order_pair(out[:, 0], out[:, 1])
            return DecodedSlots(start, end)
        return self.decoder.segments(h_time)

    def forward(self, batch: Batch, reencode: bool = False, segments=None) -> ForwardOutput:
        x = self.compose(batch, reencode, segments)
        h = self.hidden(x)
        logits = self.logits(h)
        h_time = h[batch.slot_rows, batch.slot_pos - 1]
        slots = self.decode_slots(h_time) if batch.slot_rows.size else DecodedSlots(Tensor(np.zeros(0)), Tensor(np.zeros(0)))
        return ForwardOutput(h, logits, slots, x)

    # checkpoints ------------------------------------------------------------------------
    HEADER_FIELDS = ("d", "d_v", "K", "n_layers", "n_heads", "mlp_hidden", "reg_max",
                     "codec_layers", "codec_hidden", "vocab_size", "direct_head", "refine")

    def to_bytes(self) -> bytes:
        c = self.config
        values = [c.d, c.d_v, c.K, c.n_layers, c.n_heads, c.mlp_hidden, c.reg_max,
                  c.codec_layers, c.codec_hidden, len(self.vocab), int(c.head == "direct"), int(c.refine)]
        header = struct.pack(f"<{len(values)}I", *values) + struct.pack("<d", c.delta)
        sections = [("HDR", header)]
        sections.append(("DEC", nx.stack_to_bytes(self.decoder.stack)))
        sections.append(("ENC", nx.stack_to_bytes(self.encoder.stack)))
        covered = {id(p) for p in self.decoder.parameters() + self.encoder.parameters()}
        rest = [p for p in self.parameters() if id(p) not in covered]
        sections.append(("PARS", b"".join(nx.tensor_to_bytes(p.data) for p in rest)))
        return nx.pack_sections(sections)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ToySeqModel":
        sections = dict(nx.unpack_sections(buf))
        header = sections["HDR"]
        n = len(cls.HEADER_FIELDS)
        vals = dict(zip(cls.HEADER_FIELDS, struct.unpack_from(f"<{n}I", header, 0)))
        (delta,) = struct.unpack_from("<d", header, 4 * n)
        config = ModelConfig(d=vals["d"], d_v=vals["d_v"], K=vals["K"], n_layers=vals["n_layers"],
                             n_heads=vals["n_heads"], mlp_hidden=vals["mlp_hidden"], reg_max=vals["reg_max"],
                             codec_layers=vals["codec_layers"], codec_hidden=vals["codec_hidden"], delta=delta,
                             head="direct" if vals["direct_head"] else "dist", refine=bool(vals["refine"]))
        model = cls(config)
        if len(model.vocab) != vals["vocab_size"]:
            raise ValueError("checkpoint vocabulary size does not match")
        model.decoder.stack = nx.stack_from_bytes(sections["DEC"])
        model.encoder.stack = nx.stack_from_bytes(sections["ENC"])
        covered = {id(p) for p in model.decoder.parameters() + model.encoder.parameters()}
        rest = [p for p in model.parameters() if id(p) not in covered]
        blob, offset = sections["PARS"], 0
        for p in rest:
            ndim = struct.unpack_from("<I", blob, offset)[0]
            size = 4 + 4 * ndim + 8 * p.data.size
            arr = nx.tensor_from_bytes(blob[offset:offset + size])
            if arr.shape != p.shape:
                raise ValueError("checkpoint tensor shape mismatch")
            p.data = arr
            offset += size
        if offset != len(blob):
            raise ValueError("checkpoint parameter block has trailing bytes")
        return model

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ToySeqModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def compose_input(model: ToySeqModel, seq: InputSequence, reencode: bool = False):
    """Embed one sequence. Returns ``(embeddings (S, d), roles)``."""
    batch = make_batch([seq], model.vocab)
    roles = []
    for it in seq.items:
        if isinstance(it, FrameToken):
            roles += ["time", "frame"]
        elif isinstance(it, QueryToken):
            roles.append("query")
        elif isinstance(it, TimeStampSlot):
            roles.append("slot")
        else:
            roles.append("answer")
    with nx.no_grad():
        emb = model.compose(batch, reencode)
    return emb.data[0], roles


def forward_teacher_forced(model: ToySeqModel, sequence, reencode: bool = False) -> ForwardOutput:
    batch = sequence if isinstance(sequence, Batch) else make_batch(
        sequence if isinstance(sequence, list) else [sequence], model.vocab)
    return model.forward(batch, reencode)


# generation -------------------------------------------------------------------------------

@dataclass
class Generation:
    items: list
    hidden: np.ndarray | None = None


def generate(model: ToySeqModel, frames, times, query_ids, max_len: int = 16,
             refine: bool | None = None, keep_hidden: bool = False) -> list[Generation]:
    """Greedy decoding for a batch of prompts sharing T and N.

    ``frames`` is ``(B, T, d_v)``, ``times`` ``(B, T)`` and ``query_ids`` ``(B, N)``.
    Each emitted ``<TIME_STAMP>`` is decoded into a segment; with ``refine``
    the next step's input is that segment's re-encoded time token, otherwise
    the raw ``<TIME_STAMP>`` embedding.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    refine = model.config.refine if refine is None else refine
    vocab = model.vocab
    frames = np.asarray(frames, dtype=np.float64)
    B = frames.shape[0]
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), frames.shape[:2])
    query_ids = np.asarray(query_ids, dtype=np.int64).reshape(B, -1)
    out = [Generation([]) for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    table = model.tok_emb.data
    with nx.no_grad():
        x = model.embed_prompt(frames, times, query_ids).data
        for step in range(max_len):
            h = model.hidden(Tensor(x)).data
            last = h[:, -1]
            ids = np.argmax(model.logits(Tensor(last)).data, axis=-1)
            segs = model.decode_slots(Tensor(last))
            starts, ends = segs.start.data, segs.end.data
            nxt = np.tile(table[vocab.pad_id], (B, 1))
            reenc_rows = []
            for b in range(B):
                if done[b]:
                    continue
                tok = int(ids[b])
                if tok == vocab.eos_id:
                    done[b] = True
                    if keep_hidden:
                        out[b].hidden = h[b].copy()
                elif tok == vocab.time_id:
                    out[b].items.append(make_segment(starts[b], ends[b]))
                    if refine:
                        reenc_rows.append(b)
                    else:
                        nxt[b] = table[tok]
                else:
                    out[b].items.append(tok)
                    nxt[b] = table[tok]
            if reenc_rows:
                r = np.asarray(reenc_rows)
                nxt[r] = model.encoder.embed(starts[r], ends[r]).data
            if done.all():
                break
            if step == max_len - 1:
                if keep_hidden:
                    for b in np.flatnonzero(~done):
                        out[b].hidden = h[b].copy()
                break
            x = np.concatenate([x, nxt[:, None, :]], axis=1)
    return out


def generate_samples(model: ToySeqModel, samples, max_len: int = 16, refine: bool | None = None,
                     batch_size: int = 256) -> list[Generation]:
    """Run :func:`generate` over samples, batching those with equal prompt shape."""
    vocab = model.vocab
    results: list[Generation | None] = [None] * len(samples)
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault((s.frames.shape, len(vocab.query_ids(s))), []).append(i)
    for idx in groups.values():
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo:lo + batch_size]
            frames = np.stack([samples[i].frames for i in chunk])
            times = np.stack([samples[i].timestamps for i in chunk])
            queries = np.asarray([vocab.query_ids(samples[i]) for i in chunk])
            for i, g in zip(chunk, generate(model, frames, times, queries, max_len, refine)):
                results[i] = g
    return results


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
