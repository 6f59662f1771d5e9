"""Command-line entry point: ``distime <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input or usage, 2 failure while running.
Every output file is written to a temporary sibling first and renamed into
place, so a failed run leaves no partial files behind.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import tempfile

from . import numerics as nx
from .core import TimeSegment
from .ensemble import (calibration_curve, calibration_spearman, candidate_record, ensemble_report,
                       estimate_offsets, read_candidates, score_candidates, select_ensemble,
                       simulate_candidates)
from .metrics import JsonlError, file_report, read_jsonl, read_segment_file, segment_record
from .seqmodel import ToySeqModel, generate_samples, make_batch
from .synthgen import SynthConfig, gen_dataset, sample_from_json, sample_to_json
from .trainer import (TrainConfig, TrainingDiverged, batch_loss, evaluate, parse_config, train,
                      trace_to_csv)

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@contextlib.contextmanager
def atomic_outputs():
    """Collect ``(path, text_or_bytes)`` pairs; commit them all only on success."""
    pending: list[tuple[str, str | bytes]] = []
    yield pending
    temps = []
    try:
        for path, payload in pending:
            folder = os.path.dirname(os.path.abspath(path))
            fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=folder)
            temps.append(tmp)
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload if isinstance(payload, bytes) else payload.encode("utf-8"))
        for (path, _), tmp in zip(pending, temps):
            os.replace(tmp, path)
    finally:
        for tmp in temps:
            if os.path.exists(tmp):
                os.remove(tmp)


def _lines(records) -> str:
    return "".join(r + "\n" for r in records)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_dataset(path):
    out = []
    for lineno, obj in read_jsonl(path):
        try:
            out.append(sample_from_json(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise JsonlError(path, lineno, f"bad sample: {exc}") from None
    if not out:
        raise ValueError(f"{path}: no samples")
    return out


def _thresholds(arg) -> tuple[float, ...]:
    return tuple(float(t) for t in arg.split(",")) if arg else (0.3, 0.5, 0.7)


# subcommands -------------------------------------------------------------------------------

def cmd_gen_data(args, out):
    if args.n < 1:
        raise ValueError("--n must be >= 1")
    if args.task == "candidates":
        cands, gts = simulate_candidates(args.n, args.seed)
        out.append((args.out, _lines(candidate_record(c) for c in cands)))
        if args.gt:
            out.append((args.gt, _lines(segment_record(k, [g]) for k, g in gts.items())))
        return f"{len(cands)} candidates for {len(gts)} events"
    cfg = SynthConfig(task=args.task, fuzz_q=args.fuzz, T=args.frames, K=args.patterns)
    samples = gen_dataset(args.n, args.seed, cfg)
    out.append((args.out, _lines(sample_to_json(s) for s in samples)))
    if args.gt:
        out.append((args.gt, _lines(segment_record(s.id, s.segments) for s in samples)))
    return f"{len(samples)} {args.task} samples"


def cmd_train(args, out):
    text = ""
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    config = parse_config(text, seed=args.seed, arm=args.arm, reg_max=args.reg_max, delta=args.delta,
                          steps=args.steps)
    dataset = _load_dataset(args.data) if args.data else None
    eval_set = _load_dataset(args.eval_data) if args.eval_data else None
    if dataset is not None and eval_set is None:
        eval_set = dataset[: min(len(dataset), 200)]
    result = train(config, dataset, eval_set)
    out.append((args.out, result.model.to_bytes()))
    out.append((args.trace or args.out + ".trace.csv", trace_to_csv(result.trace)))
    return result.final


def cmd_eval(args, out):
    th = _thresholds(args.threshold)
    if args.pred:
        if not args.gt:
            raise ValueError("--pred needs --gt")
        report = file_report(read_segment_file(args.pred), read_segment_file(args.gt), th, args.task)
    else:
        if not (args.checkpoint and args.data):
            raise ValueError("eval needs --pred/--gt or --checkpoint/--data")
        model = ToySeqModel.load(args.checkpoint)
        report = evaluate(model, _load_dataset(args.data), refine=_refine(args, model))
    out.append((args.out, _json(report)))
    return report


def _refine(args, model):
    return model.config.refine if args.refine is None else args.refine == "on"


def cmd_generate(args, out):
    model = ToySeqModel.load(args.checkpoint)
    samples = _load_dataset(args.data)
    gens = generate_samples(model, samples, max_len=args.max_len, refine=_refine(args, model))
    records = []
    for s, g in zip(samples, gens):
        segs = [it for it in g.items if isinstance(it, TimeSegment)]
        records.append(segment_record(s.id, segs, answer=model.vocab.render(g.items, args.duration)))
    out.append((args.out, _lines(records)))
    return f"{len(records)} predictions"


def _candidates_and_gt(args):
    cands = score_candidates(read_candidates(args.data))
    gts = None
    if args.gt:
        gts = {}
        for key, rec in read_segment_file(args.gt).items():
            if len(rec["segments"]) != 1:
                raise ValueError(f"ground truth for {key!r} must hold exactly one segment")
            gts[key] = rec["segments"][0]
    return cands, gts


def cmd_ensemble(args, out):
    cands, gts = _candidates_and_gt(args)
    offsets = estimate_offsets(cands, gts) if (args.offsets == "auto" and gts) else None
    chosen = select_ensemble(cands, offsets)
    winners = {id(c) for c in chosen.values()}
    out.append((args.out, _lines(candidate_record(c, id(c) in winners) for c in cands)))
    report = {"events": len(chosen), "offsets": offsets or {}}
    if gts:
        missing = sorted(set(chosen) - set(gts))
        if missing:
            raise ValueError(f"no ground truth for events {missing[:3]}")
        report["miou"] = ensemble_report(cands, gts, offsets)
    if args.report:
        out.append((args.report, _json(report)))
    return report


def cmd_calibrate(args, out):
    cands, gts = _candidates_and_gt(args)
    if gts is None:
        raise ValueError("calibrate needs --gt")
    curve = calibration_curve(cands, gts, args.bins)
    report = {
        "bins": [{"center": c, "miou": m, "count": n} for c, m, n in curve],
        "spearman": calibration_spearman(curve),
        "offsets": estimate_offsets(cands, gts),
    }
    out.append((args.out, _json(report)))
    return report


def cmd_gradcheck(args, out):
    config = TrainConfig(seed=args.seed, arm=args.arm or "dist_reenc", reg_max=args.reg_max or 32,
                         delta=args.delta or 1.0, steps=1)
    data = gen_dataset(8, args.seed, config.synth_config())
    model = ToySeqModel(config.model_config(data[0].frames.shape[1]), seed=args.seed)
    batch = make_batch(data, model.vocab)
    err = nx.finite_difference_check(model, lambda: batch_loss(model, batch, config),
                                     n_coords=args.n, seed=args.seed)
    print(f"max relative error: {err:.3e}")
    if args.out:
        out.append((args.out, _json({"max_rel_error": err, "coords": args.n, "seed": args.seed})))
    if not err < args.tolerance:
        raise RuntimeError(f"gradient check failed: {err:.3e} >= {args.tolerance:g}")
    return {"max_rel_error": err}


# parser -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="distime", description="Distribution-based time tokens on a toy grounding task.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = add("gen-data", cmd_gen_data, "write a synthetic dataset or candidate set as JSONL")
    sp.add_argument("--out", required=True)
    sp.add_argument("--gt", help="also write ground-truth segments here")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--task", choices=("mr", "dvc", "candidates"), default="mr")
    sp.add_argument("--fuzz", type=float, default=0.3)
    sp.add_argument("--frames", type=int, default=16)
    sp.add_argument("--patterns", type=int, default=4)

    sp = add("train", cmd_train, "train a model; writes a checkpoint and a CSV trace")
    sp.add_argument("--config")
    sp.add_argument("--data")
    sp.add_argument("--eval-data")
    sp.add_argument("--out", required=True)
    sp.add_argument("--trace")
    sp.add_argument("--arm", choices=("direct", "dist", "dist_reenc"))
    sp.add_argument("--reg-max", type=int)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--steps", type=int)

    sp = add("eval", cmd_eval, "score predictions against ground truth")
    sp.add_argument("--pred")
    sp.add_argument("--gt")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)
    sp.add_argument("--task", choices=("mr", "dvc"), default="mr")
    sp.add_argument("--threshold", help="comma-separated IoU thresholds")
    sp.add_argument("--refine", choices=("on", "off"))

    sp = add("generate", cmd_generate, "run a checkpoint and write predictions")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--refine", choices=("on", "off"))
    sp.add_argument("--duration", type=float, default=None, help="video length in seconds for rendering")
    sp.add_argument("--max-len", type=int, default=24)

    sp = add("ensemble", cmd_ensemble, "choose the best-scored candidate per event")
    sp.add_argument("--data", required=True)
    sp.add_argument("--gt")
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")
    sp.add_argument("--offsets", choices=("none", "auto"), default="none")

    sp = add("calibrate", cmd_calibrate, "score/IoU calibration curve and offset check")
    sp.add_argument("--data", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bins", type=int, default=10)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of the training loss")
    sp.add_argument("--n", type=int, default=100, help="coordinates to sample")
    sp.add_argument("--out")
    sp.add_argument("--arm", choices=("direct", "dist", "dist_reenc"))
    sp.add_argument("--reg-max", type=int)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    if getattr(args, "duration", None) is not None and not args.duration > 0:
        print("distime: error: --duration must be positive", file=sys.stderr)
        return EXIT_INVALID
    try:
        with atomic_outputs() as out:
            result = args.fn(args, out)
    except (ValueError, JsonlError, FileNotFoundError, IsADirectoryError, KeyError) as exc:
        print(f"distime: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"distime: failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    if isinstance(result, dict):
        print(json.dumps(result, sort_keys=True))
    elif result:
        print(result)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
