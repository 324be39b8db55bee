"""Report narrator: BiLSTM over fused region features, attentional decoder.

The encoder runs an LSTM left-to-right and right-to-left over the K fused
region rows and concatenates the halves. Each decode step attends over the
encoder states with a one-hidden-layer tanh scorer, feeds [token embedding;
context] into a decoder LSTM, and emits a log-softmax over the vocabulary.

Training minimizes teacher-forced NLL with AdamW (two learning-rate groups:
graph/fusion/encoder parameters vs the rest). Decoding is greedy or beam
(cumulative log-prob, no length normalization unless asked). REINFORCE
fine-tuning estimates the score-function gradient from ancestral samples and
applies plain gradient ascent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .corpus import BOS, EOS, philox
from .errors import (CheckError, ConfigError, DivergedError, EmptyBatchError,
                     ShapeError)
from .fusion import fuse_regions, init_gea_params, init_multi_head_params
from .gcn import gcn_forward, init_gcn_params
from .graph import normalized_adjacency
from .metrics import EvalPair, cider, sentence_bleu4

# parameters whose names start with these train at the encoder-side rate
ENCODER_PREFIXES = ("gcn.", "gea.", "mhgea.", "enc.")


# ---------------------------------------------------------------------------
# parameters


def init_narrator_params(store: nd.ParamStore, vocab_size: int, d_v: int,
                         cfg, seed: int) -> None:
    """Embedding, both encoder directions, decoder, attention MLP, output."""
    if vocab_size < 5:
        raise ConfigError(f"vocabulary too small for decoding: {vocab_size}")
    rng = philox("narrator-init", seed)
    d_e, d_h, d_l = cfg.d_e, cfg.d_h, cfg.d_l
    dh2 = d_h // 2
    d_u = d_v + d_l

    def mat(shape):
        return rng.normal(size=shape) / np.sqrt(shape[0])

    def lstm_bias(d):
        b = np.zeros((1, 4 * d))
        b[0, d:2 * d] = 1.0     # forget gate opens near 1 at init
        return b

    store.add("emb.E", mat((vocab_size, d_e)))
    store.add("enc.fw.W", mat((d_u + dh2, 4 * dh2)))
    store.add("enc.fw.b", lstm_bias(dh2))
    store.add("enc.bw.W", mat((d_u + dh2, 4 * dh2)))
    store.add("enc.bw.b", lstm_bias(dh2))
    store.add("dec.W", mat((d_e + d_h + d_h, 4 * d_h)))
    store.add("dec.b", lstm_bias(d_h))
    store.add("attn.W1", mat((2 * d_h, d_h)))
    store.add("attn.b1", np.zeros((1, d_h)))
    store.add("attn.w2", mat((d_h, 1)))
    store.add("out.W", mat((d_h, vocab_size)))
    store.add("out.b", np.zeros((1, vocab_size)))


def init_model_params(store: nd.ParamStore, vocab_size: int, d_v: int,
                      cfg, seed: int) -> None:
    """Every trainable tensor of the full pipeline, graph side included."""
    init_gcn_params(store, cfg.node_dim, cfg.d_l, cfg.gcn_layers, seed)
    if cfg.heads == 1:
        init_gea_params(store, d_v, cfg.d_l, seed)
    else:
        init_multi_head_params(store, d_v, cfg.d_l, cfg.heads, seed)
    init_narrator_params(store, vocab_size, d_v, cfg, seed)


def encoder_side(name: str) -> bool:
    return name.startswith(ENCODER_PREFIXES)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay and per-name learning rates."""

    def __init__(self, store: nd.ParamStore, lr_of, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.lr_of = lr_of if callable(lr_of) else (lambda name: float(lr_of))
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.v) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.v) for name, p in store.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for name, p in self.store.items():
            g = p.g
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / (1.0 - b1 ** self.t)
            vhat = v / (1.0 - b2 ** self.t)
            lr = self.lr_of(name)
            p.v -= lr * (mhat / (np.sqrt(vhat) + self.eps)
                         + self.weight_decay * p.v)


def two_rate_schedule(lr_encoder: float, lr_rest: float):
    def lr_of(name: str) -> float:
        return lr_encoder if encoder_side(name) else lr_rest
    return lr_of


# ---------------------------------------------------------------------------
# forward passes


def graph_node_states(artifact, store: nd.ParamStore, cfg) -> nd.Tensor:
    """GCN output over the built graph; shared by every study in a batch."""
    a_hat = normalized_adjacency(artifact.adjacency)
    return gcn_forward(artifact.h0, a_hat, store, cfg.gcn_layers, cfg.activation)


def study_encoder_states(visual: np.ndarray, node_states: nd.Tensor,
                         store: nd.ParamStore, cfg) -> nd.Tensor:
    """Visual regions -> graph-enhanced fusion -> BiLSTM states (K x d_h)."""
    v = nd.const(visual, name="visual")
    u = fuse_regions(v, node_states, store, cfg.measure, cfg.heads)
    return encode(u, store, cfg.d_h)


def encode(u: nd.Tensor, store: nd.ParamStore, d_h: int) -> nd.Tensor:
    """Bidirectional LSTM over region rows, zero initial states."""
    if d_h % 2 != 0:
        raise ShapeError(f"encoder width must be even, got {d_h}")
    k = u.v.shape[0]
    dh2 = d_h // 2
    w_f, b_f = store.get("enc.fw.W"), store.get("enc.fw.b")
    w_b, b_b = store.get("enc.bw.W"), store.get("enc.bw.b")

    def run(order, w, b):
        h = nd.const(np.zeros((1, dh2)))
        c = nd.const(np.zeros((1, dh2)))
        rows = {}
        for i in order:
            h, c = nd.lstm_step(nd.slice_rows(u, i, i + 1), h, c, w, b)
            rows[i] = h
        return rows

    fw = run(range(k), w_f, b_f)
    bw = run(range(k - 1, -1, -1), w_b, b_b)
    return nd.concat_rows(*[nd.concat_cols(fw[i], bw[i]) for i in range(k)])


@dataclass
class DecoderState:
    """Decoder hidden and memory rows plus the step counter."""

    s: nd.Tensor
    cell: nd.Tensor
    t: int = 0


def initial_state(d_h: int) -> DecoderState:
    return DecoderState(nd.const(np.zeros((1, d_h))),
                        nd.const(np.zeros((1, d_h))), t=0)


def decode_step(state: DecoderState, y_prev: int, h_e: nd.Tensor,
                store: nd.ParamStore):
    """One step: attention over h_e, LSTM update, log-distribution.

    Returns (new state, 1 x |V| log-probs, 1 x K attention row).
    """
    vocab_size = store.get("out.b").v.shape[1]
    if not 0 <= y_prev < vocab_size:
        raise ConfigError(f"previous token id {y_prev} outside vocabulary "
                          f"of {vocab_size}")
    k = h_e.v.shape[0]
    feat = nd.concat_cols(nd.repeat_rows(state.s, k), h_e)
    hidden = nd.tanh(nd.add_rowvec(nd.matmul(feat, store.get("attn.W1")),
                                   store.get("attn.b1")))
    beta = nd.softmax_rows(nd.transpose(nd.matmul(hidden, store.get("attn.w2"))))
    context = nd.matmul(beta, h_e)
    emb = nd.slice_rows(store.get("emb.E"), y_prev, y_prev + 1)
    x = nd.concat_cols(emb, context)
    s_new, c_new = nd.lstm_step(x, state.s, state.cell,
                                store.get("dec.W"), store.get("dec.b"))
    logits = nd.add_rowvec(nd.matmul(s_new, store.get("out.W")),
                           store.get("out.b"))
    logp = nd.log_softmax_rows(logits)
    return DecoderState(s_new, c_new, state.t + 1), logp, beta


def sequence_logprob(ids, h_e: nd.Tensor, store: nd.ParamStore) -> nd.Tensor:
    """Teacher-forced sum of stepwise log-probs of ids (BOS implied)."""
    d_h = store.get("out.W").v.shape[0]
    state = initial_state(d_h)
    prev = BOS
    total = None
    for tok in ids:
        state, logp, _ = decode_step(state, prev, h_e, store)
        term = nd.pick(logp, 0, int(tok))
        total = term if total is None else nd.add(total, term)
        prev = int(tok)
    if total is None:
        return nd.const([[0.0]])
    return total


def nll_loss(batch, store: nd.ParamStore, artifact, cfg, vocab,
             max_len: int = 128) -> nd.Tensor:
    """Mean over the batch of per-report summed negative log-likelihood.

    Gradients reach every parameter: the loss is wired end to end through
    the GCN, the fusion attention, and both LSTMs.
    """
    batch = list(batch)
    if not batch:
        raise EmptyBatchError("nll_loss needs at least one study")
    node_states = graph_node_states(artifact, store, cfg)
    total = None
    for study in batch:
        h_e = study_encoder_states(study.visual, node_states, store, cfg)
        ids = vocab.encode(study.tokens, max_len=max_len)
        nll = nd.scale(sequence_logprob(ids[1:], h_e, store), -1.0)
        total = nll if total is None else nd.add(total, nll)
    return nd.scale(total, 1.0 / len(batch))


# ---------------------------------------------------------------------------
# decoding


@dataclass(frozen=True)
class Hypothesis:
    """A (possibly finished) decode prefix with its cumulative log-prob."""

    tokens: tuple
    logp: float
    state: DecoderState
    done: bool


def greedy_ids(h_e: nd.Tensor, store: nd.ParamStore, max_len: int = 128) -> tuple:
    """Argmax decoding; ties go to the lowest token id; EOS kept if emitted."""
    d_h = store.get("out.W").v.shape[0]
    out = []
    with nd.no_grad():
        state = initial_state(d_h)
        prev = BOS
        for _ in range(max_len):
            state, logp, _ = decode_step(state, prev, h_e, store)
            tok = int(np.argmax(logp.v[0]))
            out.append(tok)
            if tok == EOS:
                break
            prev = tok
    return tuple(out)


def beam_search(h_e: nd.Tensor, store: nd.ParamStore, beam_width: int,
                max_len: int = 128, length_norm: bool = False) -> list:
    """Top beam_width hypotheses by cumulative log-prob.

    Finished hypotheses (EOS, or length max_len) park in a pool and stop
    expanding. Ties break lexicographically on token ids so the search is
    deterministic. length_norm only rescores the final ranking.
    """
    if beam_width < 1:
        raise ConfigError(f"beam width must be >= 1, got {beam_width}")
    d_h = store.get("out.W").v.shape[0]
    vocab_size = store.get("out.b").v.shape[1]
    start = Hypothesis((), 0.0, initial_state(d_h), done=max_len == 0)
    if start.done:
        return [start]
    finished = []
    live = [start]
    with nd.no_grad():
        while live:
            candidates = []
            for hyp in live:
                prev = hyp.tokens[-1] if hyp.tokens else BOS
                state, logp, _ = decode_step(hyp.state, prev, h_e, store)
                row = logp.v[0]
                grown = len(hyp.tokens) + 1
                for tok in range(vocab_size):
                    candidates.append(Hypothesis(
                        hyp.tokens + (tok,), hyp.logp + row[tok], state,
                        done=(tok == EOS or grown == max_len)))
            candidates.sort(key=lambda h: (-h.logp, h.tokens))
            top = candidates[:beam_width]
            live = [h for h in top if not h.done]
            finished.extend(h for h in top if h.done)

    def rank(h: Hypothesis):
        score = h.logp / len(h.tokens) if length_norm and h.tokens else h.logp
        return (-score, h.tokens)

    finished.sort(key=rank)
    return finished[:beam_width]


def sample_ids(h_e: nd.Tensor, store: nd.ParamStore, max_len: int, rng):
    """Ancestral sample; returns (ids, summed log-prob of the draw)."""
    d_h = store.get("out.W").v.shape[0]
    vocab_size = store.get("out.b").v.shape[1]
    out = []
    total = 0.0
    with nd.no_grad():
        state = initial_state(d_h)
        prev = BOS
        for _ in range(max_len):
            state, logp, _ = decode_step(state, prev, h_e, store)
            probs = np.exp(logp.v[0])
            probs /= probs.sum()
            tok = int(rng.choice(vocab_size, p=probs))
            total += logp.v[0, tok]
            out.append(tok)
            if tok == EOS:
                break
            prev = tok
    return tuple(out), float(total)


def encoder_states_for(study, store: nd.ParamStore, artifact, cfg) -> nd.Tensor:
    return study_encoder_states(study.visual,
                                graph_node_states(artifact, store, cfg),
                                store, cfg)


def greedy_decode(study, store: nd.ParamStore, artifact, cfg, vocab,
                  max_len: int = 128):
    """Greedy report for one study, as words with reserved ids dropped."""
    with nd.no_grad():
        h_e = encoder_states_for(study, store, artifact, cfg)
        ids = greedy_ids(h_e, store, max_len)
    return vocab.decode(ids)


def beam_decode(study, store: nd.ParamStore, artifact, cfg, beam_width: int,
                max_len: int = 128, length_norm: bool = False) -> list:
    """Beam search for one study; hypotheses carry token ids."""
    with nd.no_grad():
        h_e = encoder_states_for(study, store, artifact, cfg)
        return beam_search(h_e, store, beam_width, max_len, length_norm)


def sample_report(study, store: nd.ParamStore, artifact, cfg, vocab,
                  max_len: int, rng):
    """One ancestral sample as words, with the log-prob of the drawn ids."""
    with nd.no_grad():
        h_e = encoder_states_for(study, store, artifact, cfg)
        ids, logp = sample_ids(h_e, store, max_len, rng)
    return vocab.decode(ids), logp


# ---------------------------------------------------------------------------
# REINFORCE


def reinforce_estimate(make_states, store: nd.ParamStore, m: int, reward_fn,
                       rng, max_len: int, baseline: bool = False):
    """Score-function gradient of expected reward from m sampled reports.

    make_states() must rebuild the encoder states on a fresh tape. Returns
    (gradient dict by name, sample rewards, sampled id tuples). The gradient
    points in the ascent direction; nothing is applied here.
    """
    if m < 1:
        raise ConfigError(f"need at least one sample, got {m}")
    states = make_states()
    draws = [sample_ids(states, store, max_len, rng) for _ in range(m)]
    samples = [ids for ids, _ in draws]
    rewards = [float(reward_fn(ids)) for ids in samples]
    mean_r = sum(rewards) / m
    obj = None
    for ids, r in zip(samples, rewards):
        w = (r - mean_r) if baseline else r
        term = nd.scale(sequence_logprob(ids, states, store), w / m)
        obj = term if obj is None else nd.add(obj, term)
    store.zero_grads()
    nd.backward(obj)
    grads = {name: p.g.copy() for name, p in store.items()}
    return grads, rewards, samples


def reward_function(kind: str, reference: tuple, vocab):
    """Maps sampled ids to a scalar reward against one reference report."""
    ref = tuple(reference)

    def score(ids):
        cand = vocab.decode(ids)
        if kind == "bleu4":
            return sentence_bleu4(cand, [ref])
        if kind == "cider":
            return cider([EvalPair(cand, (ref,))]) / 10.0
        raise ConfigError(f"unknown reward {kind!r}")

    return score


def reinforce_step(study, reference, store: nd.ParamStore, artifact, cfg,
                   rl_cfg, vocab, rng, apply: bool = True):
    """One ascent step theta += lr * grad on a single study.

    Returns (gradient estimate, mean sample reward); pass apply=False to
    inspect the estimate without touching the parameters.
    """
    def make_states():
        return encoder_states_for(study, store, artifact, cfg)

    grads, rewards, _ = reinforce_estimate(
        make_states, store, rl_cfg.samples,
        reward_function(rl_cfg.reward, reference, vocab), rng,
        rl_cfg.max_len, baseline=rl_cfg.baseline)
    if apply:
        for name, p in store.items():
            p.v += rl_cfg.lr * grads[name]
    return grads, sum(rewards) / len(rewards)


def rl_finetune(studies, artifact, vocab, cfg, rl_cfg, store: nd.ParamStore,
                seed: int) -> list:
    """Round-robin REINFORCE over training studies; returns mean rewards."""
    history = []
    for step in range(rl_cfg.steps):
        study = studies[step % len(studies)]
        rng = philox("rl-sample", seed, step)
        _, mean_r = reinforce_step(study, study.tokens, store, artifact, cfg,
                                   rl_cfg, vocab, rng)
        history.append(mean_r)
    return history


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    """Final parameters plus the per-epoch log and best-epoch bookkeeping."""

    store: nd.ParamStore
    history: list
    best_epoch: int
    best_val_cider: float
    best_values: dict = field(repr=False, default_factory=dict)
    n_train: int = 0
    n_val: int = 0


def validation_cider(studies, artifact, store, cfg, vocab, max_len: int) -> float:
    """Greedy-decode the held slice and score plain CIDEr against targets."""
    with nd.no_grad():
        node_states = graph_node_states(artifact, store, cfg)
        pairs = []
        for study in studies:
            h_e = study_encoder_states(study.visual, node_states, store, cfg)
            ids = greedy_ids(h_e, store, max_len)
            pairs.append(EvalPair(vocab.decode(ids), (study.tokens,)))
    return cider(pairs)


def train(studies, artifact, vocab, cfg, train_cfg, seed: int,
          store: nd.ParamStore | None = None, out_dir=None) -> TrainResult:
    """Teacher-forced AdamW training with per-epoch validation CIDEr.

    The first min(val_cap, val_fraction) slice of the training studies is the
    validation probe (it still trains; it only steers checkpoint selection).
    Writes train_log.csv plus latest/best checkpoints when out_dir is given.
    Raises DivergedError when the loss stops being finite.
    """
    studies = list(studies)
    if not studies:
        raise EmptyBatchError("cannot train on zero studies")
    if store is None:
        store = nd.ParamStore()
        init_model_params(store, len(vocab), studies[0].visual.shape[1],
                          cfg, seed)
    opt = AdamW(store, two_rate_schedule(train_cfg.lr_encoder, train_cfg.lr_decoder),
                betas=(train_cfg.beta1, train_cfg.beta2), eps=train_cfg.eps,
                weight_decay=train_cfg.weight_decay)
    n_val = min(train_cfg.val_cap, max(1, int(len(studies) * train_cfg.val_fraction)))
    val_studies = studies[:n_val]
    history = []
    best_epoch = 0
    best_cider = -1.0
    best_values: dict = {}
    for epoch in range(1, train_cfg.epochs + 1):
        order = philox("train-shuffle", seed, epoch).permutation(len(studies))
        total_nll = 0.0
        try:
            for lo in range(0, len(order), train_cfg.batch_size):
                batch = [studies[i] for i in order[lo:lo + train_cfg.batch_size]]
                store.zero_grads()
                loss = nll_loss(batch, store, artifact, cfg, vocab,
                                max_len=train_cfg.max_len)
                nd.backward(loss)
                opt.step()
                total_nll += loss.item() * len(batch)
        except CheckError as exc:
            raise DivergedError(f"training diverged at epoch {epoch}: {exc}") from exc
        epoch_loss = total_nll / len(studies)
        if not math.isfinite(epoch_loss):
            raise DivergedError(f"loss became non-finite at epoch {epoch}")
        val = validation_cider(val_studies, artifact, store, cfg, vocab,
                               train_cfg.max_len)
        history.append({"epoch": epoch, "loss": epoch_loss, "val_cider": val})
        if out_dir is not None:
            store.save(f"{out_dir}/checkpoint_latest.json")
        if val > best_cider:
            best_cider = val
            best_epoch = epoch
            best_values = store.clone_values()
            if out_dir is not None:
                store.save(f"{out_dir}/checkpoint_best.json")
    if out_dir is not None:
        write_train_log(f"{out_dir}/train_log.csv", history)
    return TrainResult(store=store, history=history, best_epoch=best_epoch,
                       best_val_cider=best_cider, best_values=best_values,
                       n_train=len(studies), n_val=n_val)


def write_train_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_cider"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["loss"]), repr(row["val_cider"])])
