"""Command line entry point: generate, detect-drift, pipeline, eval, export.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import PipelineConfig, load_config
from .drift import detect_drift, group_by_teacher
from .errors import ConfigError, DistillError, DivergenceDetected
from .io import export_metrics, load_checkpoint, read_corpus, read_metrics, read_vocab
from .pipeline import STAGES, generate, run_pipeline
from .task import ConceptTask, evaluate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4


def _global_flags(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--config", default=default, help="YAML config file")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--run-dir", default=default)
    parser.add_argument("--threads", type=int, default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apodistill", description=__doc__.splitlines()[0])
    _global_flags(parser, None)
    # the same flags after the subcommand; SUPPRESS keeps earlier values
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="sample a teacher corpus")
    g.add_argument("--teachers", type=int)
    g.add_argument("--contexts", type=int)
    g.add_argument("--groups", type=int)
    g.add_argument("--per-context", type=int)
    g.add_argument("--rounds", type=int)
    g.add_argument("--max-len", type=int)
    g.add_argument("--drift", choices=["sudden", "gradual", "none"])

    d = sub.add_parser("detect-drift", parents=[common], help="windowed drift test on a corpus")
    d.add_argument("--corpus", help="corpus file (default: <run-dir>/corpus.jsonl)")
    d.add_argument("--vocab", help="vocabulary sidecar (default: next to the corpus)")
    d.add_argument("--step", type=int, help="test position (default: after the last corpus step)")
    d.add_argument("--window", type=int)
    d.add_argument("--alpha", type=float)
    d.add_argument("--permutations", type=int)
    d.add_argument("--correction", choices=["bonferroni", "none"])

    p = sub.add_parser("pipeline", parents=[common], help="run SPD / self-distillation / APO stages")
    p.add_argument("--stages", default=",".join(STAGES), help="comma-separated subset of spd,selfdistill,apo")
    p.add_argument("--subsample-fraction", type=float)
    p.add_argument("--apo-weights", choices=["uniform", "drift"])

    e = sub.add_parser("eval", parents=[common], help="greedy accuracy of a checkpoint on the concept task")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", help="task file (default: <run-dir>/task.json)")
    e.add_argument("--out", help="CSV output (default: <run-dir>/eval.csv)")

    x = sub.add_parser("export", parents=[common], help="teacher and ablation rows in one table")
    x.add_argument("--out", help="CSV output (default: <run-dir>/table.csv)")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.run_dir is not None:
        cfg.run_dir = args.run_dir
    if args.threads is not None:
        cfg.threads = args.threads
    overrides = {
        "teachers": "ensemble.teachers",
        "contexts": "task.contexts",
        "groups": "task.groups",
        "per_context": "corpus.per_context",
        "rounds": "corpus.rounds",
        "max_len": "corpus.max_len",
        "drift": "ensemble.drift",
        "window": "drift.window",
        "alpha": "drift.alpha",
        "permutations": "drift.permutations",
        "correction": "drift.correction",
        "subsample_fraction": "spd.subsample_fraction",
        "apo_weights": "apo.weights",
    }
    for flag, dotted in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg.override(dotted, value)
    return cfg.validate()


def cmd_generate(cfg: PipelineConfig, args) -> int:
    generate(cfg)
    corpus = Path(cfg.run_dir) / "corpus.jsonl"
    n = sum(1 for line in corpus.open(encoding="utf-8") if line.strip())
    print(f"wrote {n} records to {corpus}")
    return EXIT_OK


def cmd_detect_drift(cfg: PipelineConfig, args) -> int:
    corpus_path = Path(args.corpus) if args.corpus else Path(cfg.run_dir) / "corpus.jsonl"
    vocab_path = Path(args.vocab) if args.vocab else corpus_path.parent / "vocab.json"
    records = read_corpus(corpus_path)
    vocab = read_vocab(vocab_path)
    step = args.step if args.step is not None else max(r.corpus_step for r in records) + 1
    d = cfg.drift
    report = detect_drift(group_by_teacher(records), step, d.window, vocab.size, d.alpha, d.permutations, cfg.seed, correction=d.correction)
    for r in report.per_teacher + (report.joint,):
        mark = "DRIFT" if r.flagged else "ok"
        print(f"{r.teacher_id:>8}  stat={r.statistic:.5f}  thr={r.threshold:.5f}  p={r.p_value:.4f}  {mark}")
    out = Path(cfg.run_dir) / "drift_report.csv"
    export_metrics([report.flat()], out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_pipeline(cfg: PipelineConfig, args) -> int:
    stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    bad = [s for s in stages if s not in STAGES]
    if bad or not stages:
        raise ConfigError(f"stages: unknown stage(s) {bad}; choose from {','.join(STAGES)}")
    result = run_pipeline(cfg, stages)
    for row in result.rows:
        print(f"{row['ablation']:>12}  macro_acc={row['macro_acc']:.4f}")
    cached = [s for s in ["generate", *stages] if s not in result.ran]
    if cached:
        print(f"reused cached: {', '.join(cached)}")
    print(f"wrote {result.run_dir / 'metrics.csv'}")
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, args) -> int:
    task = ConceptTask.load(args.task or Path(cfg.run_dir) / "task.json")
    policy = load_checkpoint(args.checkpoint)
    row = {"checkpoint": Path(args.checkpoint).name, **evaluate(policy, task)}
    out = Path(args.out) if args.out else Path(cfg.run_dir) / "eval.csv"
    export_metrics([row], out)
    print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_export(cfg: PipelineConfig, args) -> int:
    root = Path(cfg.run_dir)
    teachers = read_metrics(root / "teachers.csv")
    ablation = read_metrics(root / "metrics.csv")
    group_keys = sorted(k for k in teachers[0] if k.startswith("acc_g")) if teachers else []
    rows = []
    for t in teachers:
        rows.append({"name": t["teacher"], "kind": "teacher", "macro_acc": t["macro_acc"], **{k: t[k] for k in group_keys}})
    for a in ablation:
        rows.append({"name": a["ablation"], "kind": "student", "macro_acc": a["macro_acc"], **{k: a[k] for k in group_keys}})
    out = Path(args.out) if args.out else root / "table.csv"
    export_metrics(rows, out, keys=["name", "kind", "macro_acc"] + group_keys)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "detect-drift": cmd_detect_drift,
    "pipeline": cmd_pipeline,
    "eval": cmd_eval,
    "export": cmd_export,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceDetected as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DistillError, OSError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
