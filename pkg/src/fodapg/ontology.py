"""Organ/disease entity extraction and adaptive class assignment.

Reports mention lexicon terms inside sentence segments. A mention is
disease-free when a negation cue token appears before it in its segment,
disease-specific otherwise; organ mentions always keep the organ class.
Candidates merge into nodes when their usage contexts agree (PPMI cosine).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .corpus import TokenSequence, sentence_segments
from .errors import ConfigError, NotFoundError


class EntityClass(str, Enum):
    DISEASE_SPECIFIC = "disease_specific"
    DISEASE_FREE = "disease_free"
    ORGAN = "organ"


@dataclass(frozen=True)
class CandidateEntity:
    """A lexicon surface with segment-level mention counts."""

    surface: str
    kind: str                 # "organ" | "disease"
    freq: int = 0             # segments containing the surface
    specific: int = 0         # mentions without a preceding cue
    free: int = 0             # mentions with a preceding cue


@dataclass(frozen=True)
class OntologyNode:
    """A merged entity: canonical label, class, and member candidates."""

    label: str
    entity_class: EntityClass
    members: tuple

    @property
    def freq(self) -> int:
        return sum(m.freq for m in self.members)


def find_term(segment: TokenSequence, term: str) -> int:
    """Index of the first contiguous match of term's tokens, or -1."""
    want = tuple(term.split())
    if not want:
        return -1
    for i in range(len(segment) - len(want) + 1):
        if segment[i:i + len(want)] == want:
            return i
    return -1


def classify_mention(segment: TokenSequence, entity: str, cues,
                     organs=()) -> EntityClass:
    """Class of one mention inside one sentence segment.

    Organs always classify as ORGAN. A disease is DISEASE_FREE when any cue
    token occurs at or before the mention position in the segment.
    """
    if entity in organs:
        return EntityClass.ORGAN
    pos = find_term(segment, entity)
    if pos < 0:
        raise NotFoundError(f"{entity!r} does not occur in segment {segment!r}")
    cue_set = set(cues)
    if any(tok in cue_set for tok in segment[:pos + 1]):
        return EntityClass.DISEASE_FREE
    return EntityClass.DISEASE_SPECIFIC


def extract_candidates(token_seqs, organs, diseases, cues) -> list:
    """Scan segmented reports for lexicon terms, once per sentence segment."""
    organs = tuple(organs)
    table: dict[str, CandidateEntity] = {}
    for surface in list(organs) + list(diseases):
        kind = "organ" if surface in organs else "disease"
        table[surface] = CandidateEntity(surface=surface, kind=kind)
    for seq in token_seqs:
        for seg in sentence_segments(seq):
            for surface in table:
                if find_term(seg, surface) < 0:
                    continue
                cls = classify_mention(seg, surface, cues, organs)
                cand = table[surface]
                table[surface] = replace(
                    cand,
                    freq=cand.freq + 1,
                    specific=cand.specific + (cls is EntityClass.DISEASE_SPECIFIC),
                    free=cand.free + (cls is EntityClass.DISEASE_FREE),
                )
    return [table[s] for s in sorted(table)]


def filter_candidates(cands, alpha: int, beta: int) -> list:
    """Keep exactly the candidates with alpha <= freq <= beta, order preserved."""
    if beta < alpha:
        raise ConfigError(f"need alpha <= beta, got {alpha}, {beta}")
    return [c for c in cands if alpha <= c.freq <= beta]


def similarity(a, b, stats) -> float:
    """Context agreement of two candidates: cosine of PPMI vectors in [0, 1].

    a and b may be CandidateEntity or plain surface strings. stats must
    expose ppmi_vector(surface). Zero vectors give 0.
    """
    va = stats.ppmi_vector(getattr(a, "surface", a))
    vb = stats.ppmi_vector(getattr(b, "surface", b))
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(max(0.0, np.dot(va, vb) / (na * nb)))


def merge_candidates(cands, gamma: float, sim) -> list:
    """Union candidates whose pairwise similarity reaches gamma.

    Only disease candidates merge; organs stay singleton nodes. The node
    label is the member with the highest frequency (lexicographic
    tie-break); node class is the mention-count majority, ties specific.
    Output is sorted by label so the result is order-independent.
    """
    organs = [c for c in cands if c.kind == "organ"]
    diseases = [c for c in cands if c.kind != "organ"]
    diseases.sort(key=lambda c: c.surface)

    parent = list(range(len(diseases)))

    def root(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(diseases)):
        for j in range(i + 1, len(diseases)):
            if sim(diseases[i].surface, diseases[j].surface) >= gamma:
                parent[root(j)] = root(i)

    groups: dict[int, list] = {}
    for i, c in enumerate(diseases):
        groups.setdefault(root(i), []).append(c)

    nodes = []
    for members in groups.values():
        members.sort(key=lambda c: (-c.freq, c.surface))
        specific = sum(m.specific for m in members)
        free = sum(m.free for m in members)
        cls = EntityClass.DISEASE_FREE if free > specific else EntityClass.DISEASE_SPECIFIC
        nodes.append(OntologyNode(label=members[0].surface, entity_class=cls,
                                  members=tuple(members)))
    for c in organs:
        nodes.append(OntologyNode(label=c.surface, entity_class=EntityClass.ORGAN,
                                  members=(c,)))
    nodes.sort(key=lambda n: n.label)
    return nodes
