"""Decoding and corpus evaluation under stochastic or averaged experts.

Three ways to pick experts at inference time for a gate-free model:

  dispatch_sentence  one random expert per layer, fixed for the sentence
  dispatch_token     one random expert per layer per token position
  ensemble           every expert runs and the layer outputs are averaged

Gated models ignore these modes and route with their trained gates. Expert
choices are drawn from a stream derived from (seed, sentence index), so a
corpus can be sharded in any order without changing results, and a
sentence's choices stay frozen while its decode grows.
"""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import flops
from .bleu import bleu
from .model import ForwardContext
from .rng import Rng
from .tasks import BOS_ID, EOS_ID, PAD_ID, make_batch

MODES = ("dispatch_sentence", "dispatch_token", "ensemble")


@dataclass
class DecodeConfig:
    mode: str = "dispatch_sentence"
    beam_size: int = 5
    length_penalty: float = 1.0
    max_decode_len: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown decode mode {self.mode!r}, expected one of {MODES}")
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=seed)


def _stochastic(model):
    return model.routing.mode in ("thor", "switch_random")


def _sentence_rng(seed, sentence_index):
    return Rng(seed, "route", sentence_index)


class SentenceChoices:
    """Frozen per-sentence expert choices, drawn lazily per position.

    Each (sentence, layer) owns a derived rng stream, so a choice at any
    position is independent of batch composition, padding width, and the
    other layers; a growing decode only appends draws, never disturbing
    earlier positions.
    """

    def __init__(self, mode, rng, enc_keys, dec_keys, n_experts, src_len):
        self.mode = mode
        self.n = n_experts
        self.src_len = src_len
        if mode == "ensemble":
            self.per_layer = {k: "all" for k in enc_keys + dec_keys}
        elif mode == "dispatch_sentence":
            self.per_layer = {
                k: int(rng.derive(k).integers(0, n_experts)) for k in enc_keys + dec_keys
            }
        else:
            self._streams = {k: rng.derive(k) for k in enc_keys + dec_keys}
            self.per_layer = {
                k: [int(v) for v in self._streams[k].integers(0, n_experts, size=src_len)]
                for k in enc_keys
            }
            self.dec_positions = {k: [] for k in dec_keys}

    def ensure_dec_len(self, length):
        if self.mode != "dispatch_token":
            return
        for k, col in self.dec_positions.items():
            while len(col) < length:
                col.append(int(self._streams[k].integers(0, self.n)))


def _pad_choice_rows(rows, width):
    out = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r[:width]
    return out


def build_plan(choices_list, enc_width, dec_len):
    """Stack per-sentence choices into one plan for a batched forward.

    enc_width / dec_len are the padded batch widths; pad positions get
    expert 0, which never reaches the loss or other positions.
    """
    plan = {}
    first = choices_list[0]
    if first.mode == "ensemble":
        return dict(first.per_layer)
    if first.mode == "dispatch_sentence":
        for k in first.per_layer:
            plan[k] = np.array([c.per_layer[k] for c in choices_list])
        return plan
    for k in first.per_layer:
        plan[k] = _pad_choice_rows([c.per_layer[k] for c in choices_list], enc_width)
    for c in choices_list:
        c.ensure_dec_len(dec_len)
    for k in first.dec_positions:
        plan[k] = _pad_choice_rows([c.dec_positions[k][:dec_len] for c in choices_list], dec_len)
    return plan


def make_choices(model, decode_cfg, sentence_indices, src_lens):
    if not _stochastic(model):
        return None
    enc_keys = [k for k in model.expert_layer_keys() if k.startswith("enc.")]
    dec_keys = [k for k in model.expert_layer_keys() if k.startswith("dec.")]
    return [
        SentenceChoices(
            decode_cfg.mode,
            _sentence_rng(decode_cfg.seed, idx),
            enc_keys,
            dec_keys,
            model.routing.n_experts,
            src_len,
        )
        for idx, src_len in zip(sentence_indices, src_lens)
    ]


def dispatch_forward(model, source, target_in, decode_cfg, sentence_indices):
    """Teacher-forced logits with per-sentence random routing."""
    if decode_cfg.mode not in ("dispatch_sentence", "dispatch_token"):
        raise ValueError(f"dispatch_forward needs a dispatch mode, got {decode_cfg.mode!r}")
    src_lens = (source != PAD_ID).sum(axis=1).tolist()
    choices = make_choices(model, decode_cfg, sentence_indices, src_lens)
    plan = None if choices is None else build_plan(choices, source.shape[1], target_in.shape[1])
    return model.forward(source, target_in, ForwardContext(training=False, plan=plan))


def ensemble_forward(model, source, target_in):
    """Teacher-forced logits with all experts averaged; no randomness."""
    plan = None
    if _stochastic(model):
        plan = {k: "all" for k in model.expert_layer_keys()}
    return model.forward(source, target_in, ForwardContext(training=False, plan=plan))


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_decode(model, source, decode_cfg, sentence_indices):
    """Batched greedy decoding; returns a list of token lists (no bos/eos)."""
    b, src_width = source.shape
    src_lens = (source != PAD_ID).sum(axis=1).tolist()
    choices = make_choices(model, decode_cfg, sentence_indices, src_lens)

    enc_ctx = ForwardContext(
        training=False, plan=None if choices is None else build_plan(choices, src_width, 1)
    )
    enc_out, src_keep = model.encode(source, enc_ctx)

    def fwd(tgt_in):
        plan = None if choices is None else build_plan(choices, src_width, tgt_in.shape[1])
        return model.decode(tgt_in, enc_out, src_keep, ForwardContext(training=False, plan=plan))

    tgt = np.full((b, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    for _ in range(decode_cfg.max_decode_len):
        logits = fwd(tgt).data[:, -1, :]
        nxt = np.argmax(logits, axis=-1)
        nxt[done] = PAD_ID
        done |= nxt == EOS_ID
        tgt = np.concatenate([tgt, nxt[:, None]], axis=1)
        if done.all():
            break
    out = []
    for row in tgt[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS_ID, PAD_ID):
                break
            toks.append(int(t))
        out.append(toks)
    return out


def _normalized(score, toks, penalty):
    # score covers the generated tokens, toks[0] is bos
    n = max(len(toks) - 1, 1)
    return score / n**penalty


def beam_search(model, source_seq, decode_cfg, sentence_index=0):
    """Length-normalized beam decoding of one sentence.

    A hypothesis that emits eos is complete and permanently takes one of
    the beam slots, so the live width shrinks as hypotheses finish; with
    beam_size=1 this reduces to greedy decoding exactly. Expert choices
    are drawn once for the sentence and shared by every hypothesis;
    token-level positions reuse one draw across the beam so scores stay
    comparable.
    """
    src = np.array([list(source_seq) + [EOS_ID]], dtype=np.int64)
    choices = make_choices(model, decode_cfg, [sentence_index], [src.shape[1]])

    enc_ctx = ForwardContext(
        training=False,
        plan=None if choices is None else build_plan([choices[0]], src.shape[1], 1),
    )
    enc_out, src_keep = model.encode(src, enc_ctx)
    beams = [(0.0, [BOS_ID])]  # (sum logprob, tokens)
    finished = []
    slots = decode_cfg.beam_size

    for _ in range(decode_cfg.max_decode_len):
        live = len(beams)
        width = max(len(t) for _, t in beams)
        tgt_in = np.full((live, width), PAD_ID, dtype=np.int64)
        for i, (_, toks) in enumerate(beams):
            tgt_in[i, : len(toks)] = toks
        enc_rep = ad.tensor(np.repeat(enc_out.data, live, axis=0))
        keep_rep = np.repeat(src_keep, live, axis=0)
        plan = None if choices is None else build_plan([choices[0]] * live, src.shape[1], width)
        logits = model.decode(tgt_in, enc_rep, keep_rep, ForwardContext(training=False, plan=plan)).data

        candidates = []
        for i, (score, toks) in enumerate(beams):
            logp = _log_softmax(logits[i, len(toks) - 1])
            top = np.argsort(-logp, kind="stable")[:live]
            for tok in top:
                candidates.append((score + float(logp[tok]), toks + [int(tok)]))
        candidates.sort(key=lambda c: -c[0])

        beams = []
        for score, toks in candidates[:live]:
            if toks[-1] in (EOS_ID, PAD_ID):
                finished.append((_normalized(score, toks, decode_cfg.length_penalty), toks))
                slots -= 1
            else:
                beams.append((score, toks))
        beams = beams[:slots]
        if not beams:
            break
    for score, toks in beams:  # ran out of length without eos
        finished.append((_normalized(score, toks, decode_cfg.length_penalty), toks))

    finished.sort(key=lambda c: -c[0])
    best_score, best = finished[0]
    assert all(best_score >= s for s, _ in finished[1:]), "beam pruning returned a worse hypothesis"
    return [t for t in best[1:] if t not in (EOS_ID, PAD_ID)]


def _batched(pairs, token_budget):
    """Deterministic length-ordered batches, remembering original indices."""
    order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i][0]), i))
    groups = []
    cur = []
    cur_max = 0
    for i in order:
        s_len = len(pairs[i][0]) + 1
        width = max(cur_max, s_len)
        if cur and (len(cur) + 1) * width > token_budget:
            groups.append(cur)
            cur, cur_max = [], 0
        cur.append(i)
        cur_max = max(cur_max, s_len)
    if cur:
        groups.append(cur)
    return groups


def evaluate(model, pairs, decode_cfg, token_budget=512):
    """Decode a split and report corpus score, exact match, and FLOPs."""
    if not pairs:
        raise ValueError("empty evaluation set")
    hyps = [None] * len(pairs)
    counter = flops.FlopCounter()
    with flops.counting(counter):
        if decode_cfg.beam_size == 1:
            for group in _batched(pairs, token_budget):
                batch = make_batch([pairs[i] for i in group])
                decoded = greedy_decode(model, batch.source, decode_cfg, group)
                for i, hyp in zip(group, decoded):
                    hyps[i] = hyp
        else:
            for i, (src, _) in enumerate(pairs):
                hyps[i] = beam_search(model, src, decode_cfg, sentence_index=i)
    refs = [tgt for _, tgt in pairs]
    exact = sum(h == r for h, r in zip(hyps, refs)) / len(pairs)
    return {
        "bleu": bleu(hyps, refs),
        "exact_match": exact,
        "flops_total": counter.total,
        "flops_experts": counter.by_scope.get("experts", 0),
        "hypotheses": hyps,
    }


def reference_token_probs(model, pairs, decode_cfg, token_budget=512):
    """Probability of each reference token under teacher forcing, flattened
    over the corpus in sentence order."""
    out = [None] * len(pairs)
    for group in _batched(pairs, token_budget):
        batch = make_batch([pairs[i] for i in group])
        if decode_cfg.mode == "ensemble":
            logits = ensemble_forward(model, batch.source, batch.target_in)
        else:
            logits = dispatch_forward(model, batch.source, batch.target_in, decode_cfg, group)
        logp = _log_softmax(logits.data)
        for row, i in enumerate(group):
            keep = batch.tgt_keep[row]
            ids = batch.target_out[row][keep]
            out[i] = np.exp(logp[row, np.arange(len(ids)), ids])
    return np.concatenate(out)