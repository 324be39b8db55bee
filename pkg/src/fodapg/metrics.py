"""Text-overlap metrics and clinical-efficacy scoring for generated reports.

Implements corpus BLEU, ROUGE-L, plain CIDEr (no length penalty), and a
METEOR variant restricted to exact unigram matches (no stemming or synonym
table, so the numbers are not comparable to published METEOR scores).
Clinical efficacy checks that candidate reports state the same disease
entities with the same polarity (present vs negated) as the references.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, fields

from .corpus import sentence_segments
from .errors import ConfigError
from .ontology import EntityClass, classify_mention, find_term

log = logging.getLogger(__name__)

ROUGE_BETA = 1.2


@dataclass(frozen=True)
class EvalPair:
    """One candidate report with its reference set (tokenized)."""

    candidate: tuple
    references: tuple

    def __post_init__(self):
        if len(self.references) < 1:
            raise ConfigError("an evaluation pair needs at least one reference")
        object.__setattr__(self, "candidate", tuple(self.candidate))
        object.__setattr__(self, "references",
                           tuple(tuple(r) for r in self.references))


@dataclass(frozen=True)
class MetricReport:
    """Corpus-level scores; everything in [0, 1] except cider in [0, 10]."""

    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float
    meteor_lite: float
    ce_precision: float
    ce_recall: float
    ce_f1: float

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            hi = 10.0 if f.name == "cider" else 1.0
            if not math.isfinite(val) or not -1e-9 <= val <= hi + 1e-9:
                raise ConfigError(f"{f.name}={val!r} outside [0, {hi}]")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# n-gram helpers


def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _closest_ref_len(c: int, references) -> int:
    # ties between shorter and longer references break to the shorter one
    return min((len(r) for r in references), key=lambda rl: (abs(rl - c), rl))


# ---------------------------------------------------------------------------
# BLEU


def bleu(pairs, n: int = 4) -> float:
    """Corpus BLEU-n: clipped precisions, geometric mean, brevity penalty.

    Any order with zero total precision sends the score to 0. Pairs with an
    empty candidate contribute nothing to the counts (logged once each).
    """
    if not 1 <= n <= 4:
        raise ConfigError(f"bleu order must be in 1..4, got {n}")
    pairs = list(pairs)
    if not pairs:
        return 0.0
    matched = [0] * n
    total = [0] * n
    c_len = 0
    r_len = 0
    for pair in pairs:
        cand = pair.candidate
        if not cand:
            log.warning("empty candidate scored as zero in corpus BLEU")
            continue
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), pair.references)
        for k in range(1, n + 1):
            counts = _ngrams(cand, k)
            best = Counter()
            for ref in pair.references:
                ref_counts = _ngrams(ref, k)
                for g, cnt in ref_counts.items():
                    if cnt > best[g]:
                        best[g] = cnt
            matched[k - 1] += sum(min(cnt, best[g]) for g, cnt in counts.items())
            total[k - 1] += sum(counts.values())
    if any(m == 0 or t == 0 for m, t in zip(matched, total)):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_prec)


def sentence_bleu4(candidate, references) -> float:
    """Single-sentence BLEU-4 with +1 smoothing on orders 2..4 (reward use)."""
    cand = tuple(candidate)
    if not cand:
        return 0.0
    precisions = []
    for k in range(1, 5):
        counts = _ngrams(cand, k)
        best = Counter()
        for ref in references:
            for g, cnt in _ngrams(ref, k).items():
                if cnt > best[g]:
                    best[g] = cnt
        m = sum(min(cnt, best[g]) for g, cnt in counts.items())
        t = sum(counts.values())
        if k == 1:
            if m == 0 or t == 0:
                return 0.0
            precisions.append(m / t)
        else:
            precisions.append((m + 1.0) / (t + 1.0))
    r = _closest_ref_len(len(cand), references)
    bp = 1.0 if len(cand) >= r else math.exp(1.0 - r / len(cand))
    return bp * math.exp(sum(math.log(p) for p in precisions) / 4.0)


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs_len(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pair: EvalPair) -> float:
    """LCS F-score; precision and recall each take their best reference."""
    cand = pair.candidate
    if not cand:
        return 0.0
    best_p = 0.0
    best_r = 0.0
    for ref in pair.references:
        if not ref:
            continue
        lcs = _lcs_len(cand, ref)
        best_p = max(best_p, lcs / len(cand))
        best_r = max(best_r, lcs / len(ref))
    if best_p == 0.0 and best_r == 0.0:
        return 0.0
    b2 = ROUGE_BETA * ROUGE_BETA
    denom = best_r + b2 * best_p
    if denom == 0.0:
        return 0.0
    return (1.0 + b2) * best_p * best_r / denom


# ---------------------------------------------------------------------------
# CIDEr


def _tfidf(counts: Counter, idf: dict) -> dict:
    return {g: cnt * idf.get(g, 0.0) for g, cnt in counts.items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    dot = sum(x * v[g] for g, x in u.items() if g in v)
    return dot / (nu * nv)


def _idf_tables(corpus_refs) -> list:
    n_sets = len(corpus_refs)
    tables = []
    for k in range(1, 5):
        df = Counter()
        for refs in corpus_refs:
            seen = set()
            for ref in refs:
                seen.update(_ngrams(ref, k))
            df.update(seen)
        tables.append({g: math.log(n_sets / (1.0 + d)) for g, d in df.items()})
    return tables


def cider_scores(pairs, corpus_refs=None) -> list:
    """Per-pair plain CIDEr in [0, 10].

    IDF uses document frequency over reference sets: log(N / (1 + df)).
    Per order n in 1..4 the candidate's TF-IDF vector is compared by cosine
    against every reference (zero vectors score 0), averaged over references,
    then over orders, scaled by 10.
    """
    pairs = list(pairs)
    if corpus_refs is None:
        corpus_refs = [p.references for p in pairs]
    tables = _idf_tables(list(corpus_refs))
    out = []
    for pair in pairs:
        acc = 0.0
        for k in range(1, 5):
            idf = tables[k - 1]
            cvec = _tfidf(_ngrams(pair.candidate, k), idf)
            sim = 0.0
            for ref in pair.references:
                sim += _cosine(cvec, _tfidf(_ngrams(ref, k), idf))
            acc += sim / len(pair.references)
        out.append(10.0 * acc / 4.0)
    return out


def cider(pairs, corpus_refs=None) -> float:
    scores = cider_scores(pairs, corpus_refs)
    if not scores:
        return 0.0
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# METEOR-lite


class _AlignBlowup(Exception):
    pass


def _best_alignment(cand, ref, cap: int = 200_000):
    """(max matches, min chunks over max-match alignments), exact search.

    Memoized DFS over (cand position, used-ref bitmask, chunk-extension
    position). Raises _AlignBlowup past the state cap.
    """
    memo = {}

    def go(ci, mask, adj):
        if ci == len(cand):
            return (0, 0)
        key = (ci, mask, adj)
        if key in memo:
            return memo[key]
        if len(memo) > cap:
            raise _AlignBlowup
        m, ch = go(ci + 1, mask, -1)
        best = (m, -ch)
        tok = cand[ci]
        for r, rt in enumerate(ref):
            if rt == tok and not mask & (1 << r):
                m2, ch2 = go(ci + 1, mask | (1 << r), r + 1)
                cost = 0 if r == adj else 1
                option = (m2 + 1, -(ch2 + cost))
                if option > best:
                    best = option
        memo[key] = (best[0], -best[1])
        return memo[key]

    return go(0, 0, -1)


def _greedy_alignment(cand, ref):
    """Deterministic fallback: max matches guaranteed, chunks not minimal."""
    budget = {t: min(c, Counter(ref)[t]) for t, c in Counter(cand).items()}
    used = set()
    matches = 0
    chunks = 0
    prev = None                      # (cand pos, ref pos) of last match
    for ci, tok in enumerate(cand):
        if budget.get(tok, 0) <= 0:
            continue
        choice = None
        if prev is not None and prev[0] == ci - 1:
            r = prev[1] + 1
            if r < len(ref) and ref[r] == tok and r not in used:
                choice = r
        if choice is None:
            for r, rt in enumerate(ref):
                if rt == tok and r not in used:
                    choice = r
                    break
        budget[tok] -= 1
        used.add(choice)
        matches += 1
        if prev is None or not (prev[0] == ci - 1 and prev[1] == choice - 1):
            chunks += 1
        prev = (ci, choice)
    return matches, chunks


def meteor_lite(pair: EvalPair) -> float:
    """Exact-unigram METEOR, best reference wins.

    Alignment maximizes matches then minimizes chunks; F = 10PR/(R+9P),
    penalty 0.5*(chunks/matches)^3, score F*(1-penalty). No matches -> 0.
    """
    cand = pair.candidate
    if not cand:
        return 0.0
    best = 0.0
    for ref in pair.references:
        if not ref:
            continue
        try:
            matches, chunks = _best_alignment(cand, ref)
        except _AlignBlowup:
            log.warning("meteor alignment state cap hit; using greedy fallback")
            matches, chunks = _greedy_alignment(cand, ref)
        if matches == 0:
            continue
        p = matches / len(cand)
        r = matches / len(ref)
        f_mean = 10.0 * p * r / (r + 9.0 * p)
        penalty = 0.5 * (chunks / matches) ** 3
        best = max(best, f_mean * (1.0 - penalty))
    return best


# ---------------------------------------------------------------------------
# clinical efficacy


def clinical_pairs(tokens, diseases, cues) -> frozenset:
    """(entity, polarity) pairs stated by one report's disease mentions."""
    out = set()
    for seg in sentence_segments(tuple(tokens)):
        for disease in diseases:
            if find_term(seg, disease) < 0:
                continue
            cls = classify_mention(seg, disease, cues)
            out.add((disease, cls.value))
    return frozenset(out)


def clinical_efficacy(cands, refs, diseases, cues):
    """Micro P/R/F1 of disease statements; polarity must match too.

    refs holds one reference list per candidate; a reference set's pairs are
    the union over its members.
    """
    cands = list(cands)
    refs = list(refs)
    if len(cands) != len(refs):
        raise ConfigError(f"{len(cands)} candidates but {len(refs)} reference sets")
    tp = fp = fn = 0
    for cand, ref_set in zip(cands, refs):
        got = clinical_pairs(cand, diseases, cues)
        want = frozenset().union(*(clinical_pairs(r, diseases, cues)
                                   for r in ref_set)) if ref_set else frozenset()
        tp += len(got & want)
        fp += len(got - want)
        fn += len(want - got)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


# ---------------------------------------------------------------------------
# corpus evaluation


def evaluate_pairs(pairs, diseases=(), cues=()):
    """All corpus metrics plus one row of per-pair scores each.

    Returns (MetricReport, rows). Rows carry per-pair bleu4 (the pair scored
    as its own corpus), rouge_l, cider under the corpus IDF, meteor_lite,
    and the clinical true/false positive/negative counts.
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("cannot evaluate zero pairs")
    per_cider = cider_scores(pairs)
    rows = []
    rouge_total = 0.0
    meteor_total = 0.0
    ce_tp = ce_fp = ce_fn = 0
    for i, pair in enumerate(pairs):
        r = rouge_l(pair)
        m = meteor_lite(pair)
        rouge_total += r
        meteor_total += m
        got = clinical_pairs(pair.candidate, diseases, cues)
        want = frozenset().union(*(clinical_pairs(ref, diseases, cues)
                                   for ref in pair.references))
        tp = len(got & want)
        fp = len(got - want)
        fn = len(want - got)
        ce_tp += tp
        ce_fp += fp
        ce_fn += fn
        rows.append({
            "index": i,
            "bleu4": bleu([pair], 4),
            "rouge_l": r,
            "cider": per_cider[i],
            "meteor_lite": m,
            "ce_tp": tp,
            "ce_fp": fp,
            "ce_fn": fn,
        })
    p = ce_tp / (ce_tp + ce_fp) if ce_tp + ce_fp else 0.0
    rec = ce_tp / (ce_tp + ce_fn) if ce_tp + ce_fn else 0.0
    f1 = 2.0 * p * rec / (p + rec) if p + rec else 0.0
    report = MetricReport(
        bleu1=bleu(pairs, 1), bleu2=bleu(pairs, 2),
        bleu3=bleu(pairs, 3), bleu4=bleu(pairs, 4),
        rouge_l=rouge_total / len(pairs),
        cider=sum(per_cider) / len(pairs),
        meteor_lite=meteor_total / len(pairs),
        ce_precision=p, ce_recall=rec, ce_f1=f1,
    )
    return report, rows
