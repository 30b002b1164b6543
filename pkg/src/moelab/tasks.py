"""Synthetic sequence transduction tasks with exact target oracles.

Three task kinds over a symbol alphabet (ids 4 and up; 0-3 are reserved for
pad/bos/eos/unk):

  copy                target = source
  reverse             target = source reversed
  cipher_translation  target = per-symbol substitution through a fixed
                      permutation, then each consecutive block of w+1
                      positions reversed (w = reorder_window); w=0 with the
                      identity permutation degenerates to copy

Every target is a pure function of its source, so exact-match scoring needs
no reference files. Splits are disjoint by sequence content.
"""

from dataclasses import dataclass

import numpy as np

from .rng import Rng

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
FIRST_SYMBOL = 4

TASK_KINDS = ("copy", "reverse", "cipher_translation")


@dataclass
class SyntheticTaskSpec:
    kind: str = "cipher_translation"
    vocab_size: int = 24
    min_len: int = 4
    max_len: int = 12
    train_size: int = 800
    valid_size: int = 200
    test_size: int = 200
    seed: int = 0
    reorder_window: int = 1
    identity_permutation: bool = False

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}, expected one of {TASK_KINDS}")
        if self.vocab_size <= FIRST_SYMBOL:
            raise ValueError(f"vocab_size must exceed {FIRST_SYMBOL} (reserved ids), got {self.vocab_size}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"need 1 <= min_len <= max_len, got {self.min_len}..{self.max_len}")
        if self.reorder_window < 0:
            raise ValueError("reorder_window must be >= 0")

    @property
    def n_symbols(self):
        return self.vocab_size - FIRST_SYMBOL


def cipher_permutation(spec):
    """Fixed symbol -> symbol mapping used by cipher_translation."""
    symbols = np.arange(FIRST_SYMBOL, spec.vocab_size)
    if spec.identity_permutation:
        return {int(s): int(s) for s in symbols}
    shuffled = symbols.copy()
    Rng(spec.seed, "cipher-perm").shuffle(shuffled)
    return {int(s): int(t) for s, t in zip(symbols, shuffled)}


def target_for(source, spec, perm=None):
    """The task oracle: deterministic target for a source sequence."""
    if spec.kind == "copy":
        return list(source)
    if spec.kind == "reverse":
        return list(reversed(source))
    perm = cipher_permutation(spec) if perm is None else perm
    mapped = [perm[s] for s in source]
    block = spec.reorder_window + 1
    out = []
    for i in range(0, len(mapped), block):
        out.extend(reversed(mapped[i : i + block]))
    return out


def generate_dataset(spec):
    """Splits of (source, target) pairs, disjoint by source content."""
    total = spec.train_size + spec.valid_size + spec.test_size
    n_possible = sum(spec.n_symbols**k for k in range(spec.min_len, spec.max_len + 1))
    if n_possible < 2 * total:
        raise ValueError(
            f"task space too small: {n_possible} distinct sequences for {total} requested samples"
        )
    rng = Rng(spec.seed, "data")
    perm = cipher_permutation(spec) if spec.kind == "cipher_translation" else None
    seen = set()
    sources = []
    while len(sources) < total:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        seq = tuple(int(v) for v in rng.integers(FIRST_SYMBOL, spec.vocab_size, size=length))
        if seq in seen:
            continue
        seen.add(seq)
        sources.append(seq)
    pairs = [(list(src), target_for(src, spec, perm)) for src in sources]
    return {
        "train": pairs[: spec.train_size],
        "valid": pairs[spec.train_size : spec.train_size + spec.valid_size],
        "test": pairs[spec.train_size + spec.valid_size :],
    }


@dataclass
class Batch:
    source: np.ndarray      # [B, S_src] with eos, padded
    target_in: np.ndarray   # [B, S_tgt] bos + target, padded
    target_out: np.ndarray  # [B, S_tgt] target + eos, padded
    src_keep: np.ndarray    # bool, True at non-pad positions
    tgt_keep: np.ndarray


def encode_pair(src, tgt):
    return list(src) + [EOS_ID], [BOS_ID] + list(tgt), list(tgt) + [EOS_ID]


def _pad_rows(rows):
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def make_batch(pairs):
    enc = [encode_pair(s, t) for s, t in pairs]
    source = _pad_rows([e[0] for e in enc])
    target_in = _pad_rows([e[1] for e in enc])
    target_out = _pad_rows([e[2] for e in enc])
    return Batch(
        source=source,
        target_in=target_in,
        target_out=target_out,
        src_keep=source != PAD_ID,
        tgt_keep=target_in != PAD_ID,
    )


def batch_iterator(split, batch_token_budget, seed):
    """One epoch of length-bucketed batches, each B x padded-src-len <= budget.

    Deterministic for a given seed; every sample appears exactly once.
    """
    max_src = max(len(s) for s, _ in split) + 1  # +1 for eos
    if batch_token_budget < max_src:
        raise ValueError(f"batch_token_budget {batch_token_budget} below longest source {max_src}")
    order = np.arange(len(split))
    Rng(seed, "batch-order").shuffle(order)
    # stable sort by length keeps the shuffle as random tiebreak inside buckets
    order = order[np.argsort([len(split[i][0]) for i in order], kind="stable")]
    batches = []
    cur = []
    cur_max = 0
    for i in order:
        s_len = len(split[i][0]) + 1
        width = max(cur_max, s_len)
        if cur and (len(cur) + 1) * width > batch_token_budget:
            batches.append(cur)
            cur, cur_max = [], 0
        cur.append(int(i))
        cur_max = max(cur_max, s_len)
    if cur:
        batches.append(cur)
    perm = np.arange(len(batches))
    Rng(seed, "batch-shuffle").shuffle(perm)
    for b in perm:
        yield make_batch([split[i] for i in batches[b]])
