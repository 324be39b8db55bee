import pytest

from fodapg import ontology as onto
from fodapg.corpus import tokenize
from fodapg.errors import ConfigError, NotFoundError
from fodapg.graph import accumulate_stats

CUES = ("no", "normal", "without", "clear", "free")


def seg(text):
    return tokenize(text)


def test_classify_cue_before_mention_is_free():
    assert onto.classify_mention(seg("no acute effusion"), "effusion", CUES) \
        is onto.EntityClass.DISEASE_FREE
    assert onto.classify_mention(seg("without focal edema"), "edema", CUES) \
        is onto.EntityClass.DISEASE_FREE


def test_classify_no_cue_or_cue_after_is_specific():
    assert onto.classify_mention(seg("stable effusion"), "effusion", CUES) \
        is onto.EntityClass.DISEASE_SPECIFIC
    # cue after the mention does not negate it
    assert onto.classify_mention(seg("effusion no longer enlarging"), "effusion", CUES) \
        is onto.EntityClass.DISEASE_SPECIFIC


def test_classify_organ_wins_over_cues():
    assert onto.classify_mention(seg("no change in the heart"), "heart", CUES,
                                 organs=("heart",)) is onto.EntityClass.ORGAN


def test_classify_missing_entity_raises():
    with pytest.raises(NotFoundError):
        onto.classify_mention(seg("lungs are clear"), "edema", CUES)


def test_classification_is_segment_scoped():
    # cue in an earlier segment must not leak across the comma
    toks = seg("no effusion , edema persists")
    segs = [("no", "effusion"), ("edema", "persists")]
    assert onto.classify_mention(segs[1], "edema", CUES) \
        is onto.EntityClass.DISEASE_SPECIFIC
    assert onto.classify_mention(segs[0], "effusion", CUES) \
        is onto.EntityClass.DISEASE_FREE
    assert toks  # silence unused warning


def test_extract_counts_once_per_segment():
    reports = [
        tokenize("effusion and effusion . no effusion ."),
        tokenize("the heart is normal ."),
    ]
    cands = {c.surface: c for c in onto.extract_candidates(
        reports, organs=("heart",), diseases=("effusion",), cues=CUES)}
    eff = cands["effusion"]
    assert eff.freq == 2          # twice-in-one-segment counts once
    assert eff.specific == 1
    assert eff.free == 1
    assert cands["heart"].freq == 1


def test_multiword_term_matching():
    reports = [tokenize("small pleural effusion seen .")]
    cands = onto.extract_candidates(reports, organs=(),
                                    diseases=("pleural effusion",), cues=CUES)
    assert cands[0].freq == 1
    assert onto.find_term(seg("small pleural effusion"), "pleural effusion") == 1


def test_filter_is_exactly_the_inclusive_frequency_band():
    cands = [
        onto.CandidateEntity("rare", "disease", freq=1),
        onto.CandidateEntity("mid", "disease", freq=5),
        onto.CandidateEntity("flood", "disease", freq=100),
        onto.CandidateEntity("heart", "organ", freq=40),
    ]
    kept = onto.filter_candidates(cands, alpha=2, beta=50)
    assert [c.surface for c in kept] == ["mid", "heart"]
    # boundary frequencies are kept (inclusive band) and filtering is idempotent
    assert onto.filter_candidates(cands, alpha=5, beta=5) == [cands[1]]
    assert onto.filter_candidates(kept, alpha=2, beta=50) == kept
    with pytest.raises(ConfigError):
        onto.filter_candidates(cands, alpha=5, beta=2)


def test_cue_at_entity_position_counts():
    # a disease surface that is itself a cue token classifies as free
    assert onto.classify_mention(("clear", "consolidation"), "clear", CUES) \
        is onto.EntityClass.DISEASE_FREE


def test_similarity_accepts_candidate_objects():
    reports = [tokenize("a t ."), tokenize("b t .")]
    stats = accumulate_stats(reports, {"a": ("a",), "b": ("b",), "t": ("t",)})
    ca = onto.CandidateEntity("a", "disease", freq=1)
    cb = onto.CandidateEntity("b", "disease", freq=1)
    assert onto.similarity(ca, cb, stats) == pytest.approx(1.0)


def test_similarity_identical_contexts_is_one():
    # a and b each co-occur only with the same third term
    reports = [tokenize("a t ."), tokenize("b t .")]
    stats = accumulate_stats(reports, {"a": ("a",), "b": ("b",), "t": ("t",)})
    assert onto.similarity("a", "b", stats) == pytest.approx(1.0)


def test_similarity_disjoint_contexts_is_zero():
    reports = [tokenize("a x ."), tokenize("b y .")]
    stats = accumulate_stats(reports, {"a": ("a",), "b": ("b",),
                                       "x": ("x",), "y": ("y",)})
    assert onto.similarity("a", "b", stats) == pytest.approx(0.0)


def test_similarity_zero_vector_is_zero():
    reports = [tokenize("a ."), tokenize("b t .")]
    stats = accumulate_stats(reports, {"a": ("a",), "b": ("b",), "t": ("t",)})
    assert onto.similarity("a", "b", stats) == 0.0


def _mk(surface, freq, specific=0, free=0, kind="disease"):
    return onto.CandidateEntity(surface, kind, freq=freq, specific=specific, free=free)


def test_merge_unions_similar_diseases_only():
    cands = [_mk("effusion", 10, specific=8, free=2),
             _mk("fluid", 4, specific=1, free=3),
             _mk("nodule", 6, specific=6),
             onto.CandidateEntity("heart", "organ", freq=20)]
    sim = lambda a, b: 1.0 if {a, b} == {"effusion", "fluid"} else 0.0
    nodes = onto.merge_candidates(cands, gamma=0.8, sim=sim)
    by_label = {n.label: n for n in nodes}
    assert set(by_label) == {"effusion", "nodule", "heart"}
    merged = by_label["effusion"]
    assert [m.surface for m in merged.members] == ["effusion", "fluid"]
    assert merged.freq == 14
    # 9 specific vs 5 free mentions -> stays disease-specific
    assert merged.entity_class is onto.EntityClass.DISEASE_SPECIFIC
    assert by_label["heart"].entity_class is onto.EntityClass.ORGAN


def test_merge_majority_free_and_tie_goes_specific():
    nodes = onto.merge_candidates([_mk("a", 4, specific=1, free=3)], 0.9, lambda x, y: 0)
    assert nodes[0].entity_class is onto.EntityClass.DISEASE_FREE
    nodes = onto.merge_candidates([_mk("a", 4, specific=2, free=2)], 0.9, lambda x, y: 0)
    assert nodes[0].entity_class is onto.EntityClass.DISEASE_SPECIFIC


def test_merge_label_tiebreak_lexicographic():
    cands = [_mk("zeta", 5), _mk("alpha", 5)]
    nodes = onto.merge_candidates(cands, gamma=0.5, sim=lambda a, b: 1.0)
    assert nodes[0].label == "alpha"


def test_merge_invariant_under_input_permutation():
    cands = [_mk("b", 3, specific=3), _mk("a", 7, specific=7), _mk("c", 2, free=2),
             onto.CandidateEntity("lungs", "organ", freq=9)]
    sim = lambda x, y: 1.0 if {x, y} <= {"a", "b"} else 0.0
    fwd = onto.merge_candidates(cands, 0.9, sim)
    rev = onto.merge_candidates(list(reversed(cands)), 0.9, sim)
    assert [(n.label, n.entity_class, tuple(m.surface for m in n.members))
            for n in fwd] == \
           [(n.label, n.entity_class, tuple(m.surface for m in n.members))
            for n in rev]


def test_merge_transitive_chains_union():
    cands = [_mk("a", 1), _mk("b", 5), _mk("c", 2)]
    sim = lambda x, y: 1.0 if {x, y} in ({"a", "b"}, {"b", "c"}) else 0.0
    nodes = onto.merge_candidates(cands, 0.9, sim)
    assert len(nodes) == 1
    assert nodes[0].label == "b"
    assert {m.surface for m in nodes[0].members} == {"a", "b", "c"}
