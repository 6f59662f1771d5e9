"""Synthetic grounding tasks, instruction templating and the dataset JSONL format.

A sample is a short "video" of T feature frames. Frames inside an event span
are drawn around a pattern-specific mean; everything else is background
noise. The query names the pattern, and the ground truth is the span's
normalized start/end.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields

import numpy as np

from .core import TimeSegment

TIME_MARKER = "<TIME_STAMP>"
QUERY_PLACEHOLDER = "<query_placeholder>"

MR_INSTRUCTIONS = (
    "Give you a textual query: <query_placeholder>. When does the described content occur in the video? Please return the timestamp.",
    "Here is a text query:<query_placeholder>. At what point in the video does the described event happen? Please provide the timestamp.",
    "Analyze the event description:<query_placeholder>. At what moment in the video does the described event take place? Return the timestamp.",
    "Consider the query: <query_placeholder>. When is the described event occurring in the video? Kindly provide the timestamp.",
    "Examine the following text query: <query_placeholder>. When is the described event taking place in the video? Please return the timestamp.",
)

MR_ANSWERS = (
    "The event occurs at <TIME_STAMP>.",
    "The described event takes place at <TIME_STAMP>.",
    "This situation happens at <TIME_STAMP>.",
    "This event is at <TIME_STAMP>.",
    "It takes place at <TIME_STAMP>.",
)

DVC_INSTRUCTIONS = (
    "Identify and localize a series of steps or actions occurring in the video, providing start and end timestamps and related descriptions.",
    "Localize a series of action steps in the given video, output a start and end timestamp for each step, and briefly describe the step.",
    "Capture and describe the activity events in the given video, specifying their respective time intervals, and output the time.",
    "Pinpoint the time intervals of activity events in the video, and provide detailed descriptions for each event.",
    "Detect and report the start and end timestamps of activity events in the video, along with descriptions.",
)

DVC_EVENT = "<TIME_STAMP>, {event}."


@dataclass(frozen=True)
class TemplateBank:
    mr_instructions: tuple = MR_INSTRUCTIONS
    mr_answers: tuple = MR_ANSWERS
    dvc_instructions: tuple = DVC_INSTRUCTIONS
    dvc_event: str = DVC_EVENT

    def __post_init__(self):
        if not self.mr_instructions or not self.dvc_instructions:
            raise ValueError("template bank is empty")
        if len(self.mr_answers) != len(self.mr_instructions):
            raise ValueError("each MR instruction needs a paired answer format")


DEFAULT_BANK = TemplateBank()


def pattern_name(k: int) -> str:
    return f"pattern_{k}"


@dataclass(frozen=True)
class SynthConfig:
    T: int = 16
    d_v: int = 16
    K: int = 4
    min_len: int = 3
    max_len: int = 10
    signal: float = 1.0
    noise: float = 0.25
    fuzz_q: float = 0.3
    task: str = "mr"
    min_events: int = 2
    max_events: int = 4
    pattern_seed: int = 0

    def __post_init__(self):
        if self.T < 2 or self.d_v < 1 or self.K < 1:
            raise ValueError("T >= 2, d_v >= 1 and K >= 1 are required")
        if not 1 <= self.min_len <= self.max_len <= self.T:
            raise ValueError(f"event length bounds [{self.min_len}, {self.max_len}] infeasible for T={self.T}")
        if self.task not in ("mr", "dvc"):
            raise ValueError(f"unknown task {self.task!r}")
        if not 0.0 <= self.fuzz_q <= 1.0:
            raise ValueError("fuzz_q must be a probability")
        if self.task == "dvc":
            if not 1 <= self.min_events <= self.max_events:
                raise ValueError("bad event count bounds")
            if self.max_events > self.K:
                raise ValueError("dense captioning needs K >= max_events distinct patterns")
            if self.max_events * self.min_len > self.T:
                raise ValueError("events cannot fit without overlapping")

    def pattern_means(self) -> np.ndarray:
        """K x d_v pattern means of norm ``signal``, fixed by ``pattern_seed``."""
        rng = np.random.default_rng([self.pattern_seed, 0x5EED])
        m = rng.normal(size=(self.K, self.d_v))
        return self.signal * m / np.linalg.norm(m, axis=1, keepdims=True)

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(self.T, dtype=np.float64) / (self.T - 1)


@dataclass
class GroundingSample:
    id: str
    frames: np.ndarray
    timestamps: np.ndarray
    query: int
    segments: list
    task: str = "mr"
    events: list = field(default_factory=list)
    template: int = 0
    instruction: str = ""
    answer_template: str = ""


def _span_segment(s: int, e: int, T: int) -> TimeSegment:
    return TimeSegment(s / (T - 1), e / (T - 1))


def _fill_span(frames, rng, cfg: SynthConfig, mean, s: int, e: int):
    frames[s:e + 1] = mean + cfg.noise * rng.normal(size=(e - s + 1, cfg.d_v))
    for edge in (s, e):
        if rng.random() < cfg.fuzz_q:
            background = cfg.noise * rng.normal(size=cfg.d_v)
            frames[edge] = 0.5 * frames[edge] + 0.5 * background


def _draw_spans(rng, cfg: SynthConfig, n: int) -> list[tuple[int, int]]:
    for _ in range(1000):
        lengths = rng.integers(cfg.min_len, cfg.max_len + 1, size=n)
        slack = cfg.T - int(lengths.sum())
        if slack < 0:
            continue
        # spread the free frames over n + 1 gaps
        cuts = np.sort(rng.integers(0, slack + 1, size=n))
        gaps = np.diff(np.concatenate([[0], cuts]))
        spans, pos = [], 0
        for gap, length in zip(gaps, lengths):
            pos += int(gap)
            spans.append((pos, pos + int(length) - 1))
            pos += int(length)
        return spans
    raise ValueError("could not place non-overlapping events")


def gen_sample(seed: int, config: SynthConfig = SynthConfig(), bank: TemplateBank = DEFAULT_BANK) -> GroundingSample:
    """Draw one sample; a pure function of ``(seed, config)``."""
    cfg = config
    rng = np.random.default_rng(seed)
    means = cfg.pattern_means()
    frames = cfg.noise * rng.normal(size=(cfg.T, cfg.d_v))
    if cfg.task == "mr":
        k = int(rng.integers(cfg.K))
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        s = int(rng.integers(0, cfg.T - length + 1))
        spans, events, query = [(s, s + length - 1)], [k], k
    else:
        n = int(rng.integers(cfg.min_events, cfg.max_events + 1))
        spans = _draw_spans(rng, cfg, n)
        events = [int(k) for k in rng.permutation(cfg.K)[:n]]
        query = -1
    for (s, e), k in zip(spans, events):
        _fill_span(frames, rng, cfg, means[k], s, e)
    sample = GroundingSample(
        id=f"{cfg.task}-{seed}",
        frames=frames,
        timestamps=cfg.timestamps,
        query=query,
        segments=[_span_segment(s, e, cfg.T) for s, e in spans],
        task=cfg.task,
        events=events,
    )
    record = write_instruction(sample, bank, rng)
    sample.template = record.template
    sample.instruction = record.instruction
    sample.answer_template = record.answer
    return sample


def gen_dataset(n: int, seed: int, config: SynthConfig = SynthConfig()) -> list[GroundingSample]:
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    return [gen_sample(int(s), config) for s in seeds]


# instruction records -------------------------------------------------------------

@dataclass
class InstructionRecord:
    instruction: str
    answer: str
    payloads: list
    task: str = "mr"
    template: int = 0
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.answer.count(TIME_MARKER) != len(self.payloads):
            raise ValueError("answer markers and segment payloads disagree in number")

    def to_json(self) -> str:
        return json.dumps({
            "instruction": self.instruction,
            "answer": self.answer,
            "payloads": [list(p) for p in self.payloads],
            "task": self.task,
            "template": self.template,
            "source": self.source,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "InstructionRecord":
        obj = json.loads(line)
        obj["payloads"] = [TimeSegment(*p) for p in obj["payloads"]]
        return cls(**obj)


def write_instruction(sample: GroundingSample, template_bank: TemplateBank = DEFAULT_BANK,
                      rng: np.random.Generator | None = None) -> InstructionRecord:
    """Fill a randomly chosen template for the sample's task."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if sample.task == "mr":
        i = int(rng.integers(len(template_bank.mr_instructions)))
        instruction = template_bank.mr_instructions[i].replace(QUERY_PLACEHOLDER, pattern_name(sample.query))
        answer = template_bank.mr_answers[i]
    else:
        i = int(rng.integers(len(template_bank.dvc_instructions)))
        instruction = template_bank.dvc_instructions[i]
        answer = " ".join(template_bank.dvc_event.format(event=pattern_name(k)) for k in sample.events)
    return InstructionRecord(
        instruction=instruction,
        answer=answer,
        payloads=list(sample.segments),
        task=sample.task,
        template=i,
        source={"id": sample.id, "query": sample.query},
    )


def format_span(seg: TimeSegment, duration: float) -> str:
    return f"{seg.start * duration:.1f}s - {seg.end * duration:.1f}s"


def render_final_answer(record: InstructionRecord, duration_seconds: float) -> str:
    """Replace each time marker, in order, with ``"Xs - Ys"`` in seconds."""
    if not duration_seconds > 0:
        raise ValueError("duration must be positive")
    pieces = record.answer.split(TIME_MARKER)
    out = [pieces[0]]
    for seg, tail in zip(record.payloads, pieces[1:]):
        out += [format_span(seg, duration_seconds), tail]
    return "".join(out)


def tokenize_answer(text: str) -> list[str]:
    """Lower-cased words, punctuation and time markers of an answer string."""
    return re.findall(r"<TIME_STAMP>|[A-Za-z_0-9]+|[.,]", text.replace(TIME_MARKER, f" {TIME_MARKER} "))


# JSONL -----------------------------------------------------------------------------

DATASET_FIELDS = ("id", "frames", "timestamps", "query", "segments", "task", "events",
                  "template", "instruction", "answer_template")


def sample_to_json(sample: GroundingSample) -> str:
    return json.dumps({
        "id": sample.id,
        "frames": sample.frames.tolist(),
        "timestamps": sample.timestamps.tolist(),
        "query": sample.query,
        "segments": [s.as_list() for s in sample.segments],
        "task": sample.task,
        "events": list(sample.events),
        "template": sample.template,
        "instruction": sample.instruction,
        "answer_template": sample.answer_template,
    })


def sample_from_json(obj: dict) -> GroundingSample:
    missing = [k for k in ("frames", "timestamps", "query", "segments", "task") if k not in obj]
    if missing:
        raise ValueError(f"missing fields {missing}")
    frames = np.asarray(obj["frames"], dtype=np.float64)
    timestamps = np.asarray(obj["timestamps"], dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] != timestamps.shape[0]:
        raise ValueError("frames and timestamps disagree")
    if np.any(np.diff(timestamps) < 0) or timestamps.min() < 0 or timestamps.max() > 1:
        raise ValueError("timestamps must be non-decreasing within [0, 1]")
    if obj["task"] not in ("mr", "dvc"):
        raise ValueError(f"unknown task {obj['task']!r}")
    segments = [TimeSegment(*s) for s in obj["segments"]]
    answer = obj.get("answer_template", "")
    events = obj.get("events")
    if events is None:
        events = [int(m) for m in re.findall(r"pattern_(\d+)", answer)] if obj["task"] == "dvc" else [obj["query"]]
    return GroundingSample(
        id=str(obj.get("id", "")),
        frames=frames,
        timestamps=timestamps,
        query=int(obj["query"]),
        segments=segments,
        task=obj["task"],
        events=list(events),
        template=int(obj.get("template", 0)),
        instruction=obj.get("instruction", ""),
        answer_template=answer,
    )


def sample_fields_equal(a: GroundingSample, b: GroundingSample) -> bool:
    for f in fields(GroundingSample):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, np.ndarray):
            if not np.array_equal(x, y):
                return False
        elif x != y:
            return False
    return True
