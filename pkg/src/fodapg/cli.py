"""foda: generate data, build the graph, train, decode, evaluate, inspect.

Every subcommand shares --config/--workdir plus dotted config overrides
(--train.epochs 50). Exit codes: 0 ok, 2 missing file, 3 bad config,
4 numeric divergence, 1 anything else; errors print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def apply_thread_cap(environ=os.environ) -> None:
    """Honor FODA_THREADS by capping BLAS pools before numpy loads."""
    cap = environ.get("FODA_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise SystemExit(f"foda: FODA_THREADS must be a positive integer, got {cap!r}")
    for var in _THREAD_VARS:
        environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--workdir", default="runs/default",
                        help="shared artifact directory (default runs/default)")

    parser = argparse.ArgumentParser(
        prog="foda",
        description="organ-disease graph report-generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common],
                   help="sample the synthetic corpus and vocabulary")
    sub.add_parser("build-graph", parents=[common],
                   help="extract the ontology and build the graph")
    sub.add_parser("train", parents=[common],
                   help="train the full model, checkpointing by val CIDEr")
    gen = sub.add_parser("generate", parents=[common],
                         help="decode reports for a split")
    gen.add_argument("--split", choices=("train", "test"), default="test")
    gen.add_argument("--checkpoint", help="checkpoint path (default: best)")
    ev = sub.add_parser("evaluate", parents=[common],
                        help="score generated reports against references")
    ev.add_argument("--split", choices=("train", "test"), default="test")
    ev.add_argument("--generated", help="generated JSONL (default: generate/<split>.jsonl)")
    sub.add_parser("inspect", parents=[common],
                   help="summarize the built graph")
    sub.add_parser("pipeline", parents=[common],
                   help="run gen-corpus, build-graph, train, generate, evaluate")
    return parser


def parse_overrides(rest) -> dict:
    """Leftover args as dotted config overrides: --a.b V or --a.b=V."""
    from .errors import ConfigError

    overrides = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            i += 1
            if i >= len(rest):
                raise ConfigError(f"override {tok!r} is missing a value")
            value = rest[i]
        overrides[key] = value
        i += 1
    return overrides


def _fail(code: int, exc: BaseException) -> int:
    line = {"error": {"code": code, "kind": type(exc).__name__,
                      "message": str(exc)}}
    print(json.dumps(line, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    apply_thread_cap()
    parser = build_parser()
    ns, rest = parser.parse_known_args(argv)

    from .errors import CheckError, ConfigError, DivergedError, FodaError, LoadError

    try:
        overrides = parse_overrides(rest)
        from . import pipeline
        from .config import PipelineConfig, apply_overrides, load_config

        cfg = load_config(ns.config) if ns.config else PipelineConfig()
        apply_overrides(cfg, overrides)
        work = ns.workdir

        if ns.command == "gen-corpus":
            info = pipeline.run_gen_corpus(cfg, work)
            print(f"wrote {info['n_studies']} studies "
                  f"({info['n_train']} train / {info['n_test']} test), "
                  f"vocab {info['vocab_size']} -> {info['out_dir']}")
        elif ns.command == "build-graph":
            info = pipeline.run_build_graph(cfg, work)
            print(f"graph: {info['n_nodes']} nodes, {info['n_edges']} edges "
                  f"-> {info['out_dir']}")
        elif ns.command == "train":
            info = pipeline.run_train(cfg, work)
            print(f"trained {info['epochs']} epochs, best epoch "
                  f"{info['best_epoch']} (val CIDEr {info['best_val_cider']:.4f}) "
                  f"-> {info['out_dir']}")
        elif ns.command == "generate":
            info = pipeline.run_generate(cfg, work, ns.split, ns.checkpoint)
            print(f"decoded {info['n_reports']} reports -> {info['path']}")
        elif ns.command == "evaluate":
            info = pipeline.run_evaluate(cfg, work, ns.split, ns.generated)
            r = info["report"]
            print(f"evaluated {info['n_reports']} reports: "
                  f"BLEU-4 {r.bleu4:.4f}, ROUGE-L {r.rouge_l:.4f}, "
                  f"CIDEr {r.cider:.4f}, CE-F1 {r.ce_f1:.4f} "
                  f"-> {info['out_dir']}")
        elif ns.command == "inspect":
            info = pipeline.run_inspect(cfg, work)
            for line in info["lines"]:
                print(line)
        else:   # pipeline
            info = pipeline.run_gen_corpus(cfg, work)
            print(f"[1/5] corpus: {info['n_studies']} studies")
            info = pipeline.run_build_graph(cfg, work)
            print(f"[2/5] graph: {info['n_nodes']} nodes, {info['n_edges']} edges")
            info = pipeline.run_train(cfg, work)
            print(f"[3/5] train: best epoch {info['best_epoch']} "
                  f"(val CIDEr {info['best_val_cider']:.4f})")
            info = pipeline.run_generate(cfg, work, "test", None)
            print(f"[4/5] generate: {info['n_reports']} reports")
            info = pipeline.run_evaluate(cfg, work, "test", None)
            r = info["report"]
            print(f"[5/5] evaluate: BLEU-4 {r.bleu4:.4f}, CIDEr {r.cider:.4f}, "
                  f"CE-F1 {r.ce_f1:.4f}")
        return 0
    except FileNotFoundError as exc:
        return _fail(2, exc)
    except LoadError as exc:
        return _fail(2, exc)
    except ConfigError as exc:
        return _fail(3, exc)
    except (DivergedError, CheckError) as exc:
        return _fail(4, exc)
    except FodaError as exc:
        return _fail(1, exc)


if __name__ == "__main__":
    sys.exit(main())
