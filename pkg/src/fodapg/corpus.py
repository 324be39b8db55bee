"""Synthetic study corpus: tokenizer, vocabulary, generator, JSONL io.

A study is a short templated report over an organ/disease lexicon plus a bag
of per-region visual feature vectors derived from the same latent findings.
All randomness flows through a counter-based generator (Philox) keyed by
blake2b digests of (purpose, seed, ...) so every artifact is reproducible
from the corpus seed alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .config import CorpusConfig
from .errors import ConfigError, EmptyCorpusError, EmptyReportError, LoadError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_KEEP = set("abcdefghijklmnopqrstuvwxyz0123456789 .,")

TokenSequence = tuple


def stream_seed(*parts) -> int:
    """Derive a 64-bit stream key from labeled parts; stable across runs."""
    blob = "|".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big")


def philox(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(stream_seed(*parts)))


def tokenize(text: str) -> TokenSequence:
    """Lowercase, strip to [a-z0-9 .,], split '.'/',' into their own tokens."""
    cleaned = []
    for ch in text.lower():
        if ch in _KEEP:
            if ch in ".,":
                cleaned.append(f" {ch} ")
            else:
                cleaned.append(ch)
    tokens = tuple("".join(cleaned).split())
    if not tokens:
        raise EmptyReportError(f"no tokens survived in {text!r}")
    return tokens


def sentence_segments(tokens: TokenSequence) -> list:
    """Split a token sequence into segments at '.' and ',' (dropping empties)."""
    segs, cur = [], []
    for tok in tokens:
        if tok in (".", ","):
            if cur:
                segs.append(tuple(cur))
            cur = []
        else:
            cur.append(tok)
    if cur:
        segs.append(tuple(cur))
    return segs


class Vocabulary:
    """Token/id table with reserved pad, bos, eos, unk at ids 0..3."""

    def __init__(self, tokens):
        self.tokens = tuple(RESERVED) + tuple(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary has duplicate tokens")
        self.id_of = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens: TokenSequence, max_len: int = 128) -> list:
        """BOS + ids (unk for oov), content truncated to max_len, then EOS."""
        body = [self.id_of.get(t, UNK) for t in tokens[:max_len]]
        return [BOS] + body + [EOS]


    def decode(self, ids) -> TokenSequence:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.tokens[i] if 0 <= i < len(self.tokens) else RESERVED[UNK])
        return tuple(out)

    def to_payload(self) -> dict:
        return {"format": "fodapg.vocab/1", "tokens": list(self.tokens[len(RESERVED):])}

    @classmethod
    def from_payload(cls, payload) -> "Vocabulary":
        if not isinstance(payload, dict) or payload.get("format") != "fodapg.vocab/1":
            raise LoadError("unsupported vocabulary payload")
        return cls(payload.get("tokens", []))


def build_vocab(token_seqs, min_freq: int = 1) -> Vocabulary:
    """Frequency-sorted vocabulary (count desc, then lexicographic)."""
    seqs = list(token_seqs)
    if not seqs:
        raise EmptyCorpusError("cannot build a vocabulary from zero reports")
    counts = {}
    for seq in seqs:
        for tok in seq:
            counts[tok] = counts.get(tok, 0) + 1
    kept = [t for t, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def encode_report(ts: TokenSequence, v: Vocabulary, max_len: int = 128) -> list:
    """Report tokens as ids, bracketed by BOS/EOS, content capped at max_len."""
    return v.encode(ts, max_len=max_len)


# ---------------------------------------------------------------------------
# generator


@dataclass
class Study:
    """One synthetic exam: report text plus optional region features."""

    id: str
    text: str
    findings: tuple          # latent disease labels, sorted
    visual: np.ndarray | None = None

    @property
    def tokens(self) -> TokenSequence:
        return tokenize(self.text)


def organ_of(cfg: CorpusConfig) -> dict:
    """Deterministic disease -> organ assignment (round-robin by rank)."""
    return {d: cfg.organs[i % len(cfg.organs)] for i, d in enumerate(cfg.diseases)}


def negated_diseases(cfg: CorpusConfig, seed: int) -> frozenset:
    """Diseases that are always mentioned as absent when not present.

    A fixed seeded subset at rate negation_prob, so report text stays a
    deterministic function of the latent findings.
    """
    rng = philox("negation-set", seed)
    draws = rng.random(len(cfg.diseases))
    return frozenset(d for d, u in zip(cfg.diseases, draws) if u < cfg.negation_prob)


def finding_signatures(cfg: CorpusConfig, seed: int) -> dict:
    """Per-disease unit-gaussian signature vectors, drawn once per lexicon."""
    rng = philox("signatures", seed)
    return {d: rng.normal(size=cfg.d_v) for d in cfg.diseases}


def prevalence(cfg: CorpusConfig) -> np.ndarray:
    """Per-disease presence probability: zipf weights scaled to mean_findings."""
    ranks = np.arange(1, len(cfg.diseases) + 1, dtype=np.float64)
    w = ranks ** (-cfg.zipf_exponent)
    p = cfg.mean_findings * w / w.sum()
    return np.clip(p, 0.0, 0.9)


def render_report(present, negated, cfg: CorpusConfig) -> str:
    """One sentence per organ; positives affirmative, negations as 'no X'."""
    by_organ = organ_of(cfg)
    present = set(present)
    sentences = []
    for organ in cfg.organs:
        mine = [d for d in cfg.diseases if by_organ[d] == organ]
        pos = [d for d in mine if d in present]
        neg = [d for d in mine if d in negated and d not in present]
        if pos and neg:
            sentences.append(f"the {organ} shows {' and '.join(pos)} but no {' or '.join(neg)} .")
        elif pos:
            sentences.append(f"the {organ} shows {' and '.join(pos)} .")
        elif neg:
            sentences.append(f"no {' or '.join(neg)} in the {organ} .")
        else:
            sentences.append(f"the {organ} is normal .")
    return " ".join(sentences)


def synth_visual_features(findings, cfg: CorpusConfig, seed: int, signatures) -> np.ndarray:
    """K x d_v region features: one signature row per finding, noisy background.

    Raises ConfigError when there are more findings than regions to host them.
    """
    findings = sorted(findings)
    if len(findings) > cfg.k_regions:
        raise ConfigError(f"{len(findings)} findings exceed k_regions={cfg.k_regions}")
    rng = philox("visual", seed)
    v = np.zeros((cfg.k_regions, cfg.d_v))
    for i, d in enumerate(findings):
        if d not in signatures:
            raise ConfigError(f"finding {d!r} has no signature (not in lexicon)")
        v[i] = signatures[d]
    v += rng.normal(size=v.shape) * cfg.noise
    return v


def generate_synthetic_corpus(cfg: CorpusConfig, seed: int) -> list:
    """Sample n_studies studies, each with report text and region features."""
    cfg.validate()
    p = prevalence(cfg)
    negated = negated_diseases(cfg, seed)
    signatures = finding_signatures(cfg, seed)
    studies = []
    for k in range(cfg.n_studies):
        sid = f"s{k:05d}"
        rng = philox("findings", seed, sid)
        mask = rng.random(len(p)) < p
        findings = [d for d, m in zip(cfg.diseases, mask) if m][:cfg.k_regions]
        findings = tuple(sorted(findings))
        text = render_report(findings, negated, cfg)
        visual = synth_visual_features(findings, cfg, stream_seed(seed, sid), signatures)
        studies.append(Study(id=sid, text=text, findings=findings, visual=visual))
    return studies


def attach_visuals(studies, cfg: CorpusConfig, seed: int) -> None:
    """Recompute region features for studies loaded without them."""
    signatures = finding_signatures(cfg, seed)
    for s in studies:
        s.visual = synth_visual_features(s.findings, cfg, stream_seed(seed, s.id), signatures)


def split_corpus(studies, train_fraction: float):
    """Deterministic prefix split into (train, test); both non-empty."""
    if not studies:
        raise EmptyCorpusError("cannot split an empty corpus")
    n_train = int(round(len(studies) * train_fraction))
    n_train = min(max(n_train, 1), len(studies) - 1) if len(studies) > 1 else 1
    return studies[:n_train], studies[n_train:]


def rank_frequency(studies) -> list:
    """(finding, count) pairs sorted by count desc then label."""
    counts = {}
    for s in studies:
        for d in s.findings:
            counts[d] = counts.get(d, 0) + 1
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


# ---------------------------------------------------------------------------
# jsonl io


def write_corpus_jsonl(path, studies) -> None:
    with open(path, "w") as fh:
        for s in studies:
            fh.write(json.dumps({"id": s.id, "text": s.text,
                                 "findings": list(s.findings)}) + "\n")


def read_corpus_jsonl(path) -> list:
    """Load studies (without visual features) from one-object-per-line JSON."""
    studies = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LoadError(f"line {lineno}: not valid JSON: {exc}") from exc
            if not isinstance(obj, dict) or not {"id", "text", "findings"} <= obj.keys():
                raise LoadError(f"line {lineno}: expected keys id, text, findings")
            if not isinstance(obj["findings"], list):
                raise LoadError(f"line {lineno}: findings must be a list")
            studies.append(Study(id=str(obj["id"]), text=str(obj["text"]),
                                 findings=tuple(sorted(obj["findings"]))))
    if not studies:
        raise EmptyCorpusError(f"{path} holds no studies")
    return studies
