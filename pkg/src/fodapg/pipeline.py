"""Stage orchestration: each command reads earlier artifacts from a shared
work directory, writes its own subdirectory, and drops a manifest there.

Layout under the work directory:
  corpus/    corpus.jsonl, train.jsonl, test.jsonl, vocab.json, figure
  graph/     graph.json
  train/     checkpoints, train_log.csv, loss_curve.png (rl_log.csv if on)
  generate/  <split>.jsonl
  evaluate/  metrics.json, per_report.jsonl, metrics.png
  inspect/   summary.json, graph_overview.png
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from . import narrator, plots
from . import ndcore as nd
from .config import PipelineConfig
from .corpus import (Vocabulary, attach_visuals, build_vocab,
                     generate_synthetic_corpus, rank_frequency,
                     read_corpus_jsonl, split_corpus, write_corpus_jsonl)
from .errors import ConfigError, LoadError
from .graph import GraphArtifact, build_graph
from .manifest import write_manifest
from .metrics import EvalPair, evaluate_pairs


def _outdir(work, name: str) -> Path:
    out = Path(work) / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_split(cfg: PipelineConfig, work, split: str, visuals: bool = True) -> list:
    if split not in ("train", "test", "corpus"):
        raise ConfigError(f"unknown split {split!r}")
    studies = read_corpus_jsonl(Path(work) / "corpus" / f"{split}.jsonl")
    if visuals:
        attach_visuals(studies, cfg.corpus, cfg.seed)
    return studies


def load_vocab(work) -> Vocabulary:
    path = Path(work) / "corpus" / "vocab.json"
    with open(path) as fh:
        return Vocabulary.from_payload(json.load(fh))


def load_artifact(work) -> GraphArtifact:
    return GraphArtifact.load(Path(work) / "graph" / "graph.json")


def run_gen_corpus(cfg: PipelineConfig, work) -> dict:
    started = time.time()
    out = _outdir(work, "corpus")
    studies = generate_synthetic_corpus(cfg.corpus, cfg.seed)
    train, test = split_corpus(studies, cfg.corpus.train_fraction)
    write_corpus_jsonl(out / "corpus.jsonl", studies)
    write_corpus_jsonl(out / "train.jsonl", train)
    write_corpus_jsonl(out / "test.jsonl", test)
    vocab = build_vocab([s.tokens for s in train], cfg.corpus.min_freq)
    with open(out / "vocab.json", "w") as fh:
        json.dump(vocab.to_payload(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    plots.rank_frequency_plot(rank_frequency(studies), out / "rank_frequency.png")
    outputs = [out / n for n in ("corpus.jsonl", "train.jsonl", "test.jsonl",
                                 "vocab.json", "rank_frequency.png")]
    write_manifest(out, "gen-corpus", cfg, outputs, started)
    return {"out_dir": out, "n_studies": len(studies), "n_train": len(train),
            "n_test": len(test), "vocab_size": len(vocab)}


def run_build_graph(cfg: PipelineConfig, work) -> dict:
    started = time.time()
    out = _outdir(work, "graph")
    train = load_split(cfg, work, "train", visuals=False)
    artifact = build_graph(train, cfg.corpus, cfg.ontology, cfg.seed,
                           cfg.model.node_dim)
    artifact.save(out / "graph.json")
    write_manifest(out, "build-graph", cfg, [out / "graph.json"], started)
    n_edges = int(np.triu(artifact.adjacency, 1).sum())
    return {"out_dir": out, "n_nodes": len(artifact.nodes), "n_edges": n_edges}


def run_train(cfg: PipelineConfig, work) -> dict:
    started = time.time()
    out = _outdir(work, "train")
    train_studies = load_split(cfg, work, "train")
    artifact = load_artifact(work)
    vocab = load_vocab(work)
    result = narrator.train(train_studies, artifact, vocab, cfg.model,
                            cfg.train, cfg.seed, out_dir=out)
    plots.loss_curve(result.history, out / "loss_curve.png")
    outputs = [out / n for n in ("train_log.csv", "checkpoint_latest.json",
                                 "checkpoint_best.json", "loss_curve.png")]
    summary = {"out_dir": out, "epochs": len(result.history),
               "best_epoch": result.best_epoch,
               "best_val_cider": result.best_val_cider,
               "final_loss": result.history[-1]["loss"]}
    if cfg.rl.enabled and cfg.rl.steps > 0:
        store = nd.ParamStore.load(out / "checkpoint_best.json")
        rewards = narrator.rl_finetune(train_studies, artifact, vocab,
                                       cfg.model, cfg.rl, store, cfg.seed)
        store.save(out / "checkpoint_rl.json")
        with open(out / "rl_log.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "mean_reward"])
            for step, reward in enumerate(rewards, 1):
                writer.writerow([step, repr(reward)])
        outputs += [out / "checkpoint_rl.json", out / "rl_log.csv"]
        summary["rl_mean_reward"] = rewards[-1] if rewards else 0.0
    write_manifest(out, "train", cfg, outputs, started)
    return summary


def _pick_checkpoint(cfg: PipelineConfig, work, checkpoint) -> Path:
    if checkpoint is not None:
        return Path(checkpoint)
    train_dir = Path(work) / "train"
    if cfg.rl.enabled and (train_dir / "checkpoint_rl.json").exists():
        return train_dir / "checkpoint_rl.json"
    return train_dir / "checkpoint_best.json"


def run_generate(cfg: PipelineConfig, work, split: str = "test",
                 checkpoint=None) -> dict:
    started = time.time()
    out = _outdir(work, "generate")
    studies = load_split(cfg, work, split)
    artifact = load_artifact(work)
    vocab = load_vocab(work)
    store = nd.ParamStore.load(_pick_checkpoint(cfg, work, checkpoint))
    dec = cfg.decode
    path = out / f"{split}.jsonl"
    with open(path, "w") as fh:
        for study in studies:
            if dec.mode == "beam":
                hyps = narrator.beam_decode(study, store, artifact, cfg.model,
                                            dec.beam_width, dec.max_len,
                                            dec.length_norm)
                words = vocab.decode(hyps[0].tokens)
            else:
                words = narrator.greedy_decode(study, store, artifact,
                                               cfg.model, vocab, dec.max_len)
            fh.write(json.dumps({"id": study.id, "tokens": list(words),
                                 "reference": list(study.tokens)},
                                sort_keys=True) + "\n")
    write_manifest(out, "generate", cfg, [path], started)
    return {"out_dir": out, "path": path, "n_reports": len(studies)}


def read_generated(path) -> list:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if not isinstance(obj, dict) or not {"tokens", "reference"} <= obj.keys():
                raise LoadError(f"line {lineno}: expected keys tokens, reference")
            rows.append(obj)
    if not rows:
        raise LoadError(f"no generated reports in {path}")
    return rows


def run_evaluate(cfg: PipelineConfig, work, split: str = "test",
                 generated=None) -> dict:
    started = time.time()
    out = _outdir(work, "evaluate")
    path = Path(generated) if generated else Path(work) / "generate" / f"{split}.jsonl"
    rows = read_generated(path)
    pairs = [EvalPair(tuple(r["tokens"]), (tuple(r["reference"]),))
             for r in rows]
    report, per_report = evaluate_pairs(pairs, cfg.corpus.diseases,
                                        cfg.ontology.cues)
    payload = {"format": "fodapg.metrics/1", "n_reports": len(pairs)}
    payload.update(report.to_dict())
    with open(out / "metrics.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "per_report.jsonl", "w") as fh:
        for row, src in zip(per_report, rows):
            row = dict(row, id=src.get("id"))
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    plots.metric_bars(report, out / "metrics.png")
    outputs = [out / n for n in ("metrics.json", "per_report.jsonl", "metrics.png")]
    write_manifest(out, "evaluate", cfg, outputs, started)
    return {"out_dir": out, "report": report, "n_reports": len(pairs)}


def inspect_summary(artifact: GraphArtifact) -> dict:
    adj = artifact.adjacency
    degrees = adj.sum(axis=1).astype(int)
    classes = {}
    for node in artifact.nodes:
        key = node.entity_class.value
        classes[key] = classes.get(key, 0) + 1
    ranked = sorted(zip(artifact.nodes, degrees),
                    key=lambda pair: (-pair[1], pair[0].label))
    return {
        "n_nodes": len(artifact.nodes),
        "n_edges": int(np.triu(adj, 1).sum()),
        "classes": dict(sorted(classes.items())),
        "degree_mean": round(float(degrees.mean()), 4) if len(degrees) else 0.0,
        "top_nodes": [{"label": n.label, "class": n.entity_class.value,
                       "degree": int(d), "freq": n.freq}
                      for n, d in ranked[:5]],
    }


def run_inspect(cfg: PipelineConfig, work) -> dict:
    started = time.time()
    out = _outdir(work, "inspect")
    artifact = load_artifact(work)
    summary = inspect_summary(artifact)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    degrees = artifact.adjacency.sum(axis=1).astype(int)
    plots.graph_overview(summary["classes"], degrees, out / "graph_overview.png")
    outputs = [out / "summary.json", out / "graph_overview.png"]
    write_manifest(out, "inspect", cfg, outputs, started)
    lines = [f"nodes: {summary['n_nodes']}  edges: {summary['n_edges']}  "
             f"mean degree: {summary['degree_mean']}"]
    for key, count in summary["classes"].items():
        lines.append(f"class {key}: {count}")
    for entry in summary["top_nodes"]:
        lines.append(f"  {entry['label']} ({entry['class']}) "
                     f"degree={entry['degree']} freq={entry['freq']}")
    return {"out_dir": out, "summary": summary, "lines": lines}
