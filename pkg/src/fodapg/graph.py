"""Organ-disease graph: co-occurrence statistics, edges, spectra, WL labels.

Edges connect entities whose conditional co-occurrence across reports clears
a threshold. Node features are random projections of PPMI context vectors.
The spectral tooling (cyclic Jacobi eigensolver, Chebyshev filtering) is
self-contained so the certified paths never route through LAPACK.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import philox, sentence_segments
from .errors import CheckError, LoadError, ShapeError, SingularDegreeError
from .ontology import CandidateEntity, EntityClass, OntologyNode, find_term

GRAPH_FORMAT = "fodapg.graph/1"

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# co-occurrence


@dataclass
class CooccurrenceStats:
    """Report-level counts plus segment-level context vectors per label."""

    labels: tuple
    count: dict                      # label -> reports containing it
    joint: dict                      # (a, b) sorted -> reports containing both
    context_vocab: tuple
    context: dict                    # label -> float64 counts over context_vocab
    n_reports: int

    def ppmi_vector(self, label: str) -> np.ndarray:
        """Positive PMI of the label against every context token.

        ppmi(w, c) = max(0, log(n_wc * total / (n_w * n_c))) with marginals
        taken over the label-context count matrix.
        """
        if label not in self.context:
            raise ShapeError(f"no context vector for label {label!r}")
        mat = np.stack([self.context[l] for l in self.labels])
        total = mat.sum()
        if total == 0:
            return np.zeros(len(self.context_vocab))
        row = self.context[label]
        n_w = row.sum()
        n_c = mat.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            pmi = np.log(row * total / (n_w * n_c))
        pmi[~np.isfinite(pmi)] = 0.0
        return np.maximum(pmi, 0.0)


def accumulate_stats(token_seqs, terms: dict) -> CooccurrenceStats:
    """Count report-level (co-)occurrence and segment-level contexts.

    terms maps a label to the surfaces that mean it. A label occurs in a
    report when any surface matches a contiguous token span of a segment;
    report-level counts saturate at one. Context vectors count the other
    tokens of every segment containing the label ('.' and ',' excluded).
    """
    labels = tuple(sorted(terms))
    vocab = sorted({t for seq in token_seqs for t in seq} - {".", ","})
    vindex = {t: i for i, t in enumerate(vocab)}
    count = {l: 0 for l in labels}
    joint = {}
    context = {l: np.zeros(len(vocab)) for l in labels}
    n_reports = 0
    for seq in token_seqs:
        n_reports += 1
        present = set()
        for seg in sentence_segments(seq):
            for label in labels:
                hit = None
                for surface in terms[label]:
                    pos = find_term(seg, surface)
                    if pos >= 0:
                        hit = (pos, tuple(surface.split()))
                        break
                if hit is None:
                    continue
                present.add(label)
                pos, words = hit
                skip = set(range(pos, pos + len(words)))
                vec = context[label]
                for i, tok in enumerate(seg):
                    if i not in skip and tok in vindex:
                        vec[vindex[tok]] += 1.0
        for label in present:
            count[label] += 1
        ordered = sorted(present)
        for i in range(len(ordered)):
            for j in range(i + 1, len(ordered)):
                key = (ordered[i], ordered[j])
                joint[key] = joint.get(key, 0) + 1
    return CooccurrenceStats(labels=labels, count=count, joint=joint,
                             context_vocab=tuple(vocab), context=context,
                             n_reports=n_reports)


# ---------------------------------------------------------------------------
# edges and features


def build_edges(stats: CooccurrenceStats, delta: float):
    """0/1 symmetric adjacency over stats.labels.

    i-j connect when either conditional co-occurrence P(i|j) or P(j|i)
    reaches delta. Self-loops are never set here.
    """
    labels = stats.labels
    n = len(labels)
    a = np.zeros((n, n), dtype=np.int64)
    conf = {}
    for i in range(n):
        for j in range(i + 1, n):
            key = (labels[i], labels[j])
            nij = stats.joint.get(key, 0)
            if nij == 0:
                continue
            p_i_given_j = nij / stats.count[labels[j]]
            p_j_given_i = nij / stats.count[labels[i]]
            strength = max(p_i_given_j, p_j_given_i)
            if strength >= delta:
                a[i, j] = a[j, i] = 1
                conf[key] = strength
    return a, conf


def node_features(nodes, surface_stats: CooccurrenceStats, dim: int, seed: int) -> np.ndarray:
    """N x dim features: mean over members of projected PPMI context vectors.

    The projection is a fixed seeded gaussian map scaled by 1/sqrt(dim).
    """
    rng = philox("node-features", seed)
    proj = rng.normal(size=(len(surface_stats.context_vocab), dim)) / np.sqrt(dim)
    h = np.zeros((len(nodes), dim))
    for i, node in enumerate(nodes):
        vecs = [surface_stats.ppmi_vector(m.surface) @ proj for m in node.members]
        h[i] = np.mean(vecs, axis=0)
        if not h[i].any():
            log.warning("node %r has an all-zero context vector; features are zero",
                        node.label)
    return h


def normalized_adjacency(a: np.ndarray) -> np.ndarray:
    """Self-loop renormalized adjacency D^{-1/2} (A + I) D^{-1/2}."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency must be square, got {a.shape}")
    if not np.array_equal(a, a.T):
        raise ShapeError("adjacency must be symmetric")
    at = a + np.eye(a.shape[0])
    d = at.sum(axis=1)
    dinv = 1.0 / np.sqrt(d)
    return (at * dinv).T * dinv


# ---------------------------------------------------------------------------
# spectra


def jacobi_eigh(sym: np.ndarray, tol: float = 1e-12, max_sweeps: int = 200):
    """Eigendecomposition of a small symmetric matrix by cyclic Jacobi.

    Returns (eigenvalues ascending, eigenvectors as columns). Sized for
    desk-scale graphs; refuses matrices above 64x64.
    """
    a = np.array(sym, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ShapeError(f"expected square matrix, got {a.shape}")
    if n > 64:
        raise CheckError(f"jacobi solver is capped at 64 nodes, got {n}")
    if np.abs(a - a.T).max() > 1e-10:
        raise CheckError("matrix is not symmetric")
    a = (a + a.T) / 2.0
    v = np.eye(n)
    if n == 1:
        return a[0, 0:1].copy(), v

    def off(m):
        # summed directly off the off-diagonal entries; the sum-minus-diagonal
        # form cancels catastrophically near convergence
        d = m.copy()
        np.fill_diagonal(d, 0.0)
        return np.sqrt((d * d).sum())

    for _ in range(max_sweeps):
        if off(a) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 1.0 / (2.0 * tau)
                elif tau != 0:
                    t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                else:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rp, rq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * rp - s * rq
                a[:, q] = s * rp + c * rq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise CheckError(f"jacobi did not reach off-diagonal < {tol}")
    order = np.argsort(np.diag(a), kind="stable")
    return np.diag(a)[order].copy(), v[:, order].copy()


@dataclass
class SpectralDecomposition:
    """Normalized-Laplacian spectrum L = I - D^{-1/2} A D^{-1/2} = U diag(lam) U^T."""

    laplacian: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    lambda_max: float = 2.0


def laplacian_eigs(a: np.ndarray) -> SpectralDecomposition:
    """Spectrum of the (no-self-loop) normalized Laplacian of adjacency a.

    Raises SingularDegreeError when the graph has an isolated node.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency must be square, got {a.shape}")
    deg = a.sum(axis=1)
    if (deg == 0).any():
        bad = int(np.flatnonzero(deg == 0)[0])
        raise SingularDegreeError(f"node {bad} is isolated; normalized laplacian undefined")
    dinv = 1.0 / np.sqrt(deg)
    lap = np.eye(a.shape[0]) - (a * dinv).T * dinv
    lap = (lap + lap.T) / 2.0
    lam, u = jacobi_eigh(lap)
    # rotation dust can leave lambda_0 at -1e-16; the true spectrum is >= 0
    lam[(lam < 0.0) & (lam > -1e-12)] = 0.0
    return SpectralDecomposition(laplacian=lap, eigenvalues=lam, eigenvectors=u)


def chebyshev_apply(lap: np.ndarray, theta, x: np.ndarray,
                    lambda_max: float = 2.0) -> np.ndarray:
    """Apply sum_k theta_k T_k(Lhat) to x by the three-term recurrence.

    Lhat = 2 L / lambda_max - I rescales the spectrum into [-1, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    lhat = 2.0 * lap / lambda_max - np.eye(lap.shape[0])
    t_prev = x
    out = theta[0] * t_prev
    if len(theta) > 1:
        t_cur = lhat @ x
        out = out + theta[1] * t_cur
        for k in range(2, len(theta)):
            t_next = 2.0 * (lhat @ t_cur) - t_prev
            out = out + theta[k] * t_next
            t_prev, t_cur = t_cur, t_next
    return out


def spectral_apply(dec: SpectralDecomposition, theta, x: np.ndarray) -> np.ndarray:
    """Same filter as chebyshev_apply, via the eigenbasis: U g(lam) U^T x."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    lhat = 2.0 * dec.eigenvalues / dec.lambda_max - 1.0
    t_prev = np.ones_like(lhat)
    g = theta[0] * t_prev
    if len(theta) > 1:
        t_cur = lhat.copy()
        g = g + theta[1] * t_cur
        for k in range(2, len(theta)):
            t_next = 2.0 * lhat * t_cur - t_prev
            g = g + theta[k] * t_next
            t_prev, t_cur = t_cur, t_next
    u = dec.eigenvectors
    return u @ (g[:, None] * (u.T @ x))


# ---------------------------------------------------------------------------
# weisfeiler-lehman refinement


def _wl_hash(label: str, neighbors) -> str:
    sig = label + "|" + ",".join(sorted(neighbors))
    return hashlib.blake2b(sig.encode(), digest_size=8).hexdigest()


def wl_refine(a: np.ndarray, labels, iterations: int) -> list:
    """Iterated neighborhood-label compression.

    Returns one sorted label tuple per iteration (iteration 0 = the input
    labels). Two graphs agree on every round iff 1-WL cannot tell them apart.
    """
    a = np.asarray(a)
    if a.shape[0] != len(labels):
        raise ShapeError(f"{len(labels)} labels for {a.shape[0]} nodes")
    cur = [str(l) for l in labels]
    history = [tuple(sorted(cur))]
    for _ in range(iterations):
        nxt = []
        for i in range(len(cur)):
            neigh = [cur[j] for j in np.flatnonzero(a[i])]
            nxt.append(_wl_hash(cur[i], neigh))
        cur = nxt
        history.append(tuple(sorted(cur)))
    return history


# ---------------------------------------------------------------------------
# artifact


@dataclass
class GraphArtifact:
    """Everything downstream modules need: nodes, adjacency, features."""

    nodes: list
    adjacency: np.ndarray
    h0: np.ndarray
    delta: float
    seed: int
    edge_conf: dict = field(default_factory=dict)

    @property
    def labels(self) -> list:
        return [n.label for n in self.nodes]

    def node_index(self) -> dict:
        return {n.label: i for i, n in enumerate(self.nodes)}

    def to_payload(self) -> dict:
        return {
            "format": GRAPH_FORMAT,
            "delta": self.delta,
            "seed": self.seed,
            "nodes": [
                {
                    "label": n.label,
                    "class": n.entity_class.value,
                    "members": [
                        {"surface": m.surface, "kind": m.kind, "freq": m.freq,
                         "specific": m.specific, "free": m.free}
                        for m in n.members
                    ],
                }
                for n in self.nodes
            ],
            "adjacency": self.adjacency.astype(int).tolist(),
            "h0": self.h0.tolist(),
            "edge_conf": [[a, b, p] for (a, b), p in sorted(self.edge_conf.items())],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_payload(), fh)

    @classmethod
    def from_payload(cls, payload: dict) -> "GraphArtifact":
        if not isinstance(payload, dict) or payload.get("format") != GRAPH_FORMAT:
            found = payload.get("format") if isinstance(payload, dict) else type(payload).__name__
            raise LoadError(f"unsupported graph payload format {found!r}, "
                            f"expected {GRAPH_FORMAT!r}")
        try:
            nodes = []
            for nd_ in payload["nodes"]:
                members = tuple(
                    CandidateEntity(surface=m["surface"], kind=m["kind"],
                                    freq=int(m["freq"]), specific=int(m["specific"]),
                                    free=int(m["free"]))
                    for m in nd_["members"]
                )
                nodes.append(OntologyNode(label=nd_["label"],
                                          entity_class=EntityClass(nd_["class"]),
                                          members=members))
            adjacency = np.asarray(payload["adjacency"], dtype=np.int64)
            h0 = np.asarray(payload["h0"], dtype=np.float64)
            conf = {(a, b): float(p) for a, b, p in payload.get("edge_conf", [])}
            art = cls(nodes=nodes, adjacency=adjacency, h0=h0,
                      delta=float(payload["delta"]), seed=int(payload["seed"]),
                      edge_conf=conf)
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"malformed graph payload: {exc}") from exc
        if art.adjacency.shape != (len(nodes), len(nodes)):
            raise LoadError("adjacency shape does not match node count")
        if art.h0.shape[0] != len(nodes):
            raise LoadError("feature rows do not match node count")
        return art

    @classmethod
    def load(cls, path) -> "GraphArtifact":
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise LoadError(f"graph file is not valid JSON: {exc}") from exc
        return cls.from_payload(payload)


def build_graph(studies, corpus_cfg, onto_cfg, seed: int, node_dim: int) -> GraphArtifact:
    """Corpus -> candidates -> merged nodes -> edges + features, one call."""
    from .ontology import extract_candidates, filter_candidates, merge_candidates, similarity

    token_seqs = [s.tokens for s in studies]
    cands = extract_candidates(token_seqs, corpus_cfg.organs, corpus_cfg.diseases,
                               onto_cfg.cues)
    kept = filter_candidates(cands, onto_cfg.alpha, onto_cfg.beta)
    surface_stats = accumulate_stats(token_seqs, {c.surface: (c.surface,) for c in kept})
    nodes = merge_candidates(kept, onto_cfg.gamma,
                             lambda a, b: similarity(a, b, surface_stats))
    node_stats = accumulate_stats(
        token_seqs, {n.label: tuple(m.surface for m in n.members) for n in nodes})
    # merge_candidates sorts nodes by label and stats sort labels too, so rows align
    assert list(node_stats.labels) == [n.label for n in nodes]
    adjacency, conf = build_edges(node_stats, onto_cfg.delta)
    h0 = node_features(nodes, surface_stats, node_dim, seed)
    return GraphArtifact(nodes=nodes, adjacency=adjacency, h0=h0,
                         delta=onto_cfg.delta, seed=seed, edge_conf=conf)
