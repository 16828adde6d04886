"""Command-line surface: ingest, train, prune-run, eval, export.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.  Failures
print a machine-readable JSON object to stderr.  Export commands never mutate
run artifacts, so re-exporting is idempotent.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, config_from_text, load_config
from .corpus import (
    CorpusError,
    ingest,
    ingest_texts,
    load_corpus,
    save_corpus,
    split_corpus,
    synthesize_documents,
)
from .pipeline import (
    RunAbort,
    evaluate_checkpoint_perplexity,
    execute_run,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _fail(exc: BaseException, code: int) -> int:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(payload), file=sys.stderr)
    return code


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config, args.override or [])
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.output:
        cfg.run.output_dir = args.output
    cfg.validate()
    return cfg


def cmd_ingest(args) -> int:
    if args.synthetic:
        docs = synthesize_documents(args.synthetic_docs, args.synthetic_words,
                                    args.seed if args.seed is not None else 0)
        corpus = ingest_texts([
            (f"synthetic-{i:04d}", d.encode("utf-8")) for i, d in enumerate(docs)])
    else:
        if not args.paths:
            raise CorpusError("no input files given (or use --synthetic)")
        corpus = ingest(args.paths)
    save_corpus(corpus, args.output)
    print(json.dumps({"tokens": len(corpus), "documents": corpus.n_docs,
                      "output": str(args.output)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if cfg.run.mode != "from_scratch":
        raise ConfigError(f"train requires run.mode = from_scratch, got {cfg.run.mode!r}")
    result = execute_run(cfg, resume_from=args.resume)
    print(json.dumps(result.summary))
    return EXIT_OK


def cmd_prune_run(args) -> int:
    cfg = _load_run_config(args)
    if cfg.run.mode not in ("integrated", "naive", "resume_ablation"):
        raise ConfigError(
            f"prune-run requires mode integrated|naive|resume_ablation, got {cfg.run.mode!r}")
    result = execute_run(cfg, resume_from=args.resume)
    print(json.dumps(result.summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    run_cfg = config_from_text(ckpt.config_text)
    frac = args.holdout_fraction if args.holdout_fraction is not None \
        else run_cfg.data.holdout_fraction
    split_seed = args.split_seed if args.split_seed is not None \
        else run_cfg.data.split_seed
    _, heldout = split_corpus(corpus, frac, split_seed)
    ppl = evaluate_checkpoint_perplexity(ckpt, heldout, max_tokens=args.max_tokens)
    print(json.dumps({"heldout_ppl": ppl, "step": ckpt.step,
                      "hidden_sizes": ckpt.weights.hidden_sizes()}))
    return EXIT_OK


def _read_metrics(run_dir: Path) -> list[dict]:
    path = run_dir / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} is missing")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("step,"):
        raise ValueError(f"{path} has no metrics header")
    header = lines[0].split(",")
    rows = []
    last_step = 0
    for line in lines[1:]:
        if not line:
            continue
        row = dict(zip(header, line.split(",")))
        step = int(row["step"])
        if step <= last_step:
            raise ValueError(f"{path} is corrupt: steps not strictly increasing")
        last_step = step
        rows.append(row)
    return rows


def cmd_export(args) -> int:
    run_dir = Path(args.run)
    out_dir = Path(args.output) if args.output else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.kind in ("loss_curve", "lr_curve"):
        rows = _read_metrics(run_dir)
        col = "train_loss" if args.kind == "loss_curve" else "lr"
        out = out_dir / f"{args.kind}.csv"
        with open(out, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"step,{col}\n")
            for row in rows:
                f.write(f"{row['step']},{row[col]}\n")
        print(json.dumps({"output": str(out), "rows": len(rows)}))
        return EXIT_OK
    # ppl_table: aggregate summaries of several runs
    run_dirs = [run_dir] + [Path(r) for r in (args.runs or [])]
    table = []
    for rd in run_dirs:
        summary_path = rd / "summary.json"
        if not summary_path.exists():
            raise FileNotFoundError(f"{summary_path} is missing")
        s = json.loads(summary_path.read_text(encoding="utf-8"))
        table.append({
            "run": rd.name, "mode": s["mode"], "prune_method": s["prune_method"],
            "lr_mode": s.get("lr_mode", ""), "seed": s["seed"],
            "final_heldout_ppl": s["final_heldout_ppl"],
            "final_train_loss": s["final_train_loss"],
        })
    out_csv = out_dir / "ppl_table.csv"
    cols = list(table[0].keys())
    with open(out_csv, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(cols) + "\n")
        for row in table:
            f.write(",".join(str(row[c]) for c in cols) + "\n")
    out_json = out_dir / "ppl_table.json"
    out_json.write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({"output": str(out_csv), "rows": len(table)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunelab",
        description="Deterministic desk-scale training engine for "
                    "enlarge-and-prune experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="tokenize text files into a corpus cache")
    p.add_argument("paths", nargs="*", help="input text files (one document each)")
    p.add_argument("--output", required=True, help="corpus cache file to write")
    p.add_argument("--synthetic", action="store_true",
                   help="generate a synthetic corpus instead of reading files")
    p.add_argument("--synthetic-docs", type=int, default=64)
    p.add_argument("--synthetic-words", type=int, default=2000,
                   help="words per synthetic document")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ingest)

    for name, fn, help_text in (
            ("train", cmd_train, "train a target-size model from scratch"),
            ("prune-run", cmd_prune_run,
             "run an enlarge-and-prune pipeline (integrated, naive, or ablation)")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--output", default=None, help="override run.output_dir")
        p.add_argument("--resume", default=None,
                       help="continue this run from a saved checkpoint")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="held-out perplexity of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="corpus cache file")
    p.add_argument("--holdout-fraction", type=float, default=None)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--max-tokens", type=int, default=0,
                   help="cap on evaluated tokens (0 = all)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="emit plot-ready series from a run directory")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--kind", required=True,
                   choices=("loss_curve", "lr_curve", "ppl_table"))
    p.add_argument("--runs", nargs="*", default=None,
                   help="additional run directories (ppl_table)")
    p.add_argument("--output", default=None, help="output directory (default: run dir)")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        # bad configuration or bad references (ConfigError and CorpusError
        # are ValueErrors); broken artifacts and aborts are runtime failures
        return _fail(exc, EXIT_CONFIG)
    except (RunAbort, CheckpointError, Exception) as exc:  # noqa: BLE001
        return _fail(exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
