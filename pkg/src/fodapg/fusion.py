"""Graph-enhanced attention: align region features with node representations.

Single-head scoring supports three measures between a region query v and a
node representation h:

    dot            v @ W_a @ h^T
    neg_euclidean  -||v - h W_a^T||^2
    cosine         cos(v, h W_a^T)   (zero vectors score 0)

Rows of the score matrix softmax into attention; the attended node summary
g concatenates onto v to form the fused encoder input U = [V ; G].
"""

from __future__ import annotations

import numpy as np

from . import ndcore as nd
from .corpus import philox
from .errors import ConfigError

MEASURES = ("dot", "neg_euclidean", "cosine")


def init_gea_params(store: nd.ParamStore, d_v: int, d_l: int, seed: int,
                    prefix: str = "gea.") -> str:
    rng = philox("gea-init", seed)
    name = f"{prefix}W_a"
    store.add(name, rng.normal(size=(d_v, d_l)) / np.sqrt(d_v))
    return name


def init_multi_head_params(store: nd.ParamStore, d_v: int, d_l: int, heads: int,
                           seed: int, prefix: str = "mhgea.") -> None:
    if d_l % heads != 0:
        raise ConfigError(f"d_l={d_l} not divisible by heads={heads}")
    rng = philox("mh-init", seed)
    d_head = d_l // heads
    for h in range(heads):
        store.add(f"{prefix}h{h}.W_a", rng.normal(size=(d_v, d_head)) / np.sqrt(d_v))
        store.add(f"{prefix}h{h}.W_v", rng.normal(size=(d_l, d_head)) / np.sqrt(d_l))
    store.add(f"{prefix}W_o", rng.normal(size=(d_l, d_l)) / np.sqrt(d_l))


def gea_scores(v: nd.Tensor, hn: nd.Tensor, w_a: nd.Tensor,
               measure: str = "dot") -> nd.Tensor:
    """K x N attention rows (softmaxed) of regions over nodes."""
    if measure not in MEASURES:
        raise ConfigError(f"unknown attention measure {measure!r}")
    if measure == "dot":
        logits = nd.matmul(nd.matmul(v, w_a), nd.transpose(hn))
    else:
        m = nd.matmul(hn, nd.transpose(w_a))     # nodes mapped into region space
        if measure == "neg_euclidean":
            # -||v_k - m_n||^2 expanded so it stays a few matrix ops
            cross = nd.scale(nd.matmul(v, nd.transpose(m)), -2.0)
            sq = nd.outer_add(nd.rowwise_sumsq(v),
                              nd.transpose(nd.rowwise_sumsq(m)))
            logits = nd.scale(nd.add(sq, cross), -1.0)
        else:
            logits = nd.matmul(nd.row_normalize(v),
                               nd.transpose(nd.row_normalize(m)))
    return nd.softmax_rows(logits)


def gea_attend(alpha: nd.Tensor, hn: nd.Tensor) -> nd.Tensor:
    """Attention-weighted node summaries, one row per region."""
    return nd.matmul(alpha, hn)


def gea_fuse(v: nd.Tensor, g: nd.Tensor) -> nd.Tensor:
    """U = [V ; G] along columns: K x (d_v + d_l)."""
    return nd.concat_cols(v, g)


def single_head(v: nd.Tensor, hn: nd.Tensor, store: nd.ParamStore,
                measure: str = "dot", prefix: str = "gea.") -> nd.Tensor:
    alpha = gea_scores(v, hn, store.get(f"{prefix}W_a"), measure)
    return gea_attend(alpha, hn)


def multi_head(v: nd.Tensor, hn: nd.Tensor, store: nd.ParamStore, heads: int,
               prefix: str = "mhgea.") -> nd.Tensor:
    """Per-head projected dot attention, concatenated then mixed by W_o."""
    outs = []
    for h in range(heads):
        q = nd.matmul(v, store.get(f"{prefix}h{h}.W_a"))
        kv = nd.matmul(hn, store.get(f"{prefix}h{h}.W_v"))
        alpha = nd.softmax_rows(nd.matmul(q, nd.transpose(kv)))
        outs.append(nd.matmul(alpha, kv))
    cat = outs[0] if len(outs) == 1 else nd.concat_cols(*outs)
    return nd.matmul(cat, store.get(f"{prefix}W_o"))


def fuse_regions(v: nd.Tensor, hn: nd.Tensor, store: nd.ParamStore,
                 measure: str, heads: int) -> nd.Tensor:
    """Full fusion path: single- or multi-head by config, then concat."""
    if heads == 1:
        g = single_head(v, hn, store, measure)
    else:
        g = multi_head(v, hn, store, heads)
    return gea_fuse(v, g)
