"""Command line front end.

Subcommands walk the pipeline: synth -> mix -> train -> decode -> score ->
analyze-gates. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

from . import featio, mixsim, training
from .config import load_config, save_config
from .mixsim import ToyCorpus, build_eval_grid, load_cell, load_grid_index, materialize_grid, synth_corpus
from .scoring import ConditionReport, gate_histogram, score_cell, werr
from .system import System, make_cell_decoder, make_cell_gate_fn


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="anchorasr", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="command")

    sp = sub.add_parser("synth", parents=[], help="generate the synthetic corpus")
    sp.add_argument("--config", required=True, help="experiment config JSON")
    sp.add_argument("--out", required=True, help="corpus output directory")

    mp = sub.add_parser("mix", help="materialize the evaluation mixture grid")
    mp.add_argument("--config", required=True)
    mp.add_argument("--corpus", required=True, help="directory written by synth")
    mp.add_argument("--out", required=True, help="grid output directory")
    mp.add_argument("--split", default="test", choices=mixsim.SPLITS)

    tp = sub.add_parser("train", help="train a system")
    tp.add_argument("--config", required=True)
    tp.add_argument("--corpus", required=True)
    tp.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    tp.add_argument("--resume", action="store_true", help="continue from last.ckpt if present")

    dp = sub.add_parser("decode", help="decode one feature file")
    dp.add_argument("--checkpoint", required=True)
    dp.add_argument("--features", required=True, help="feature file (.bin)")
    dp.add_argument("--anchor-len", type=int, required=True, help="anchor length in raw frames")

    cp = sub.add_parser("score", help="decode and score a mixture grid")
    cp.add_argument("--checkpoint", required=True)
    cp.add_argument("--mix", required=True, help="grid directory written by mix")
    cp.add_argument("--out", required=True, help="report output directory")
    cp.add_argument("--system-name", default=None, help="label in the report (default: config system)")
    cp.add_argument("--baseline-report", default=None,
                    help="report.json to compute relative WER reduction against")

    gp = sub.add_parser("analyze-gates", help="histogram gate values on one grid cell")
    gp.add_argument("--checkpoint", required=True)
    gp.add_argument("--mix", required=True)
    gp.add_argument("--cell", required=True, help="cell name, e.g. snr5_shift100")
    gp.add_argument("--out", required=True, help="CSV output path")
    gp.add_argument("--bins", type=int, default=50)
    return p


def _load_corpus(path) -> ToyCorpus:
    return ToyCorpus.load(path)


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    corpus = synth_corpus(cfg.corpus)
    corpus.save(args.out)
    save_config(cfg, Path(args.out) / "experiment.json")
    n = sum(len(v) for v in corpus.splits.values())
    print(f"synthesized {n} utterances into {args.out}")
    return 0


def cmd_mix(args) -> int:
    cfg = load_config(args.config)
    corpus = _load_corpus(args.corpus)
    cells = build_eval_grid(corpus, args.split, cfg.mixer.eval_utts_per_cell,
                            cfg.mixer.seed, cfg.mixer.snr_grid, cfg.mixer.shift_grid)
    materialize_grid(cells, corpus, args.out)
    print(f"materialized {len(cells)} cells "
          f"x {cfg.mixer.eval_utts_per_cell} utterances into {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    corpus = _load_corpus(args.corpus)

    def progress(epoch, step, total, dev):
        print(f"epoch {epoch}: step {step}, train loss {total:.4f}, dev loss {dev:.4f}")

    result = training.train(cfg, corpus, args.out, resume=args.resume, progress=progress)
    print(f"done: {result.steps} steps, best dev loss {result.best_dev:.4f}; "
          f"checkpoints in {args.out}")
    return 0


def cmd_decode(args) -> int:
    system, _, _ = System.load(args.checkpoint)
    frames = featio.read_features(args.features)
    tokens = system.decode(frames, args.anchor_len)
    print(" ".join(str(t) for t in tokens))
    return 0


def cmd_score(args) -> int:
    system, _, _ = System.load(args.checkpoint)
    name = args.system_name or system.cfg.system
    # identify the model by content, not location: reports must come out
    # byte-identical when the same pipeline runs under a different root
    ckpt = Path(args.checkpoint)
    digest = hashlib.sha256(ckpt.read_bytes()).hexdigest()[:16]
    report = ConditionReport(system=name,
                             checkpoint=f"{ckpt.name} sha256:{digest}")
    mix_dir = Path(args.mix)
    for info in load_grid_index(mix_dir):
        cell = load_cell(mix_dir / info["manifest"])
        decode_fn = make_cell_decoder(system, mix_dir / info["name"])
        report.add(score_cell(decode_fn, cell))
    if args.baseline_report:
        base = ConditionReport.load(args.baseline_report)
        r = werr(report, base)
        report.werr_vs = base.system
        report.werr_percent = r.percent
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json", out / "report.txt")
    print((out / "report.txt").read_text(), end="")
    return 0


def cmd_analyze_gates(args) -> int:
    system, _, _ = System.load(args.checkpoint)
    mix_dir = Path(args.mix)
    manifest = mix_dir / args.cell / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    cell = load_cell(manifest)
    gate_fn = make_cell_gate_fn(system, mix_dir / args.cell)
    hist = gate_histogram(gate_fn, cell, system.cfg.model.stack_factor, bins=args.bins)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    hist.save_csv(args.out)
    print(f"gate means: target {hist.target_mean:.4f}, "
          f"background {hist.background_mean:.4f}; wrote {args.out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "mix": cmd_mix,
    "train": cmd_train,
    "decode": cmd_decode,
    "score": cmd_score,
    "analyze-gates": cmd_analyze_gates,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (_UsageError,) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
