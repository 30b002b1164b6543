"""Encoder-decoder transformer whose feed-forward sublayers hold experts.

Layers use the pre-norm residual arrangement: each sublayer sees a
layer-normalized input and adds its output back onto the raw stream, with a
final normalization after the last layer. Attention masks are boolean keep
masks (True = may attend); fully masked rows come out as zeros, never NaN.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import flops
from .routing import ExpertLayer, RoutingConfig


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    d_head: int = 8
    d_ff: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    vocab_src: int = 32
    vocab_tgt: int = 32
    dropout_rate: float = 0.1
    max_seq_len: int = 64

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_head", "d_ff", "n_enc_layers", "n_dec_layers", "vocab_src", "vocab_tgt", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(
                f"n_heads * d_head must equal d_model: {self.n_heads} * {self.d_head} != {self.d_model}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class ForwardContext:
    """Per-call state threaded through a forward pass.

    plan maps layer keys to expert choices (see routing); telemetry and aux
    are output lists the expert layers append to when present.
    """

    training: bool = False
    dropout_rng: object = None
    route_rng: object = None
    plan: dict = None
    telemetry: list = None
    aux: list = None


class Linear:
    def __init__(self, d_in, d_out, rng, name):
        # each component draws from its own stream so init is independent
        # of construction order and of which other components exist
        r = rng.derive(name)
        self.w = ad.tensor(r.normal(0.02, (d_in, d_out)), requires_grad=True, name=f"{name}.w")
        self.b = ad.tensor(np.zeros(d_out), requires_grad=True, name=f"{name}.b")

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)

    def named_params(self):
        yield self.w.name, self.w
        yield self.b.name, self.b


class LayerNorm:
    def __init__(self, d, name):
        self.gain = ad.tensor(np.ones(d), requires_grad=True, name=f"{name}.gain")
        self.bias = ad.tensor(np.zeros(d), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)

    def named_params(self):
        yield self.gain.name, self.gain
        yield self.bias.name, self.bias


class MultiHeadAttention:
    def __init__(self, config: ModelConfig, rng, name):
        d = config.d_model
        self.n_heads = config.n_heads
        self.d_head = config.d_head
        self.dropout_rate = config.dropout_rate
        self.wq = Linear(d, d, rng, f"{name}.wq")
        self.wk = Linear(d, d, rng, f"{name}.wk")
        self.wv = Linear(d, d, rng, f"{name}.wv")
        self.wo = Linear(d, d, rng, f"{name}.wo")

    def _split(self, x, b, s):
        return ad.transpose(ad.reshape(x, (b, s, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, q_in, k_in, v_in, keep, ctx):
        """keep broadcasts against [B, heads, S_q, S_k]; True = may attend."""
        with flops.scope("attention"):
            b, sq, _ = q_in.data.shape
            sk = k_in.data.shape[1]
            q = self._split(self.wq(q_in), b, sq)
            k = self._split(self.wk(k_in), b, sk)
            v = self._split(self.wv(v_in), b, sk)
            scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d_head))
            probs = ad.masked_softmax(scores, keep)
            if ctx.training and self.dropout_rate > 0.0:
                probs = ad.dropout(probs, self.dropout_rate, ctx.dropout_rng)
            out = ad.matmul(probs, v)
            out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, sq, self.n_heads * self.d_head))
            return self.wo(out)

    def named_params(self):
        for lin in (self.wq, self.wk, self.wv, self.wo):
            yield from lin.named_params()


class EncoderLayer:
    def __init__(self, config, routing, rng, name):
        self.ln1 = LayerNorm(config.d_model, f"{name}.ln1")
        self.attn = MultiHeadAttention(config, rng, f"{name}.attn")
        self.ln2 = LayerNorm(config.d_model, f"{name}.ln2")
        self.experts = ExpertLayer(config.d_model, config.d_ff, routing, rng, f"{name}.ffn")
        self.dropout_rate = config.dropout_rate

    def forward(self, x, attn_keep, unit_keep, ctx, layer_key):
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h, h, attn_keep, ctx))
        f = self.experts.forward(self.ln2(x), unit_keep, ctx, layer_key)
        if ctx.training and self.dropout_rate > 0.0:
            f = ad.dropout(f, self.dropout_rate, ctx.dropout_rng)
        return ad.add(x, f)

    def named_params(self):
        for part in (self.ln1, self.attn, self.ln2, self.experts):
            yield from part.named_params()


class DecoderLayer:
    def __init__(self, config, routing, rng, name):
        self.ln1 = LayerNorm(config.d_model, f"{name}.ln1")
        self.self_attn = MultiHeadAttention(config, rng, f"{name}.self_attn")
        self.ln2 = LayerNorm(config.d_model, f"{name}.ln2")
        self.cross_attn = MultiHeadAttention(config, rng, f"{name}.cross_attn")
        self.ln3 = LayerNorm(config.d_model, f"{name}.ln3")
        self.experts = ExpertLayer(config.d_model, config.d_ff, routing, rng, f"{name}.ffn")
        self.dropout_rate = config.dropout_rate

    def forward(self, x, enc_out, self_keep, cross_keep, unit_keep, ctx, layer_key):
        h = self.ln1(x)
        x = ad.add(x, self.self_attn(h, h, h, self_keep, ctx))
        h = self.ln2(x)
        x = ad.add(x, self.cross_attn(h, enc_out, enc_out, cross_keep, ctx))
        f = self.experts.forward(self.ln3(x), unit_keep, ctx, layer_key)
        if ctx.training and self.dropout_rate > 0.0:
            f = ad.dropout(f, self.dropout_rate, ctx.dropout_rng)
        return ad.add(x, f)

    def named_params(self):
        for part in (self.ln1, self.self_attn, self.ln2, self.cross_attn, self.ln3, self.experts):
            yield from part.named_params()


class Seq2SeqTransformer:
    """Token ids in, target-vocabulary logits out.

    Expert layer keys are "enc.{i}" and "dec.{i}"; routing plans and
    telemetry refer to layers by these keys.
    """

    def __init__(self, config: ModelConfig, routing: RoutingConfig, rng):
        self.config = config
        self.routing = routing
        self.src_emb = ad.tensor(
            rng.derive("src_emb").normal(0.02, (config.vocab_src, config.d_model)),
            requires_grad=True,
            name="src_emb",
        )
        self.tgt_emb = ad.tensor(
            rng.derive("tgt_emb").normal(0.02, (config.vocab_tgt, config.d_model)),
            requires_grad=True,
            name="tgt_emb",
        )
        self.positions = ad.sinusoidal_positions(config.max_seq_len, config.d_model)
        self.enc_layers = [
            EncoderLayer(config, routing, rng, f"enc.{i}") for i in range(config.n_enc_layers)
        ]
        self.dec_layers = [
            DecoderLayer(config, routing, rng, f"dec.{i}") for i in range(config.n_dec_layers)
        ]
        self.enc_ln = LayerNorm(config.d_model, "enc.final_ln")
        self.dec_ln = LayerNorm(config.d_model, "dec.final_ln")
        self.out_proj = Linear(config.d_model, config.vocab_tgt, rng, "out_proj")

    # -- parameter registry ---------------------------------------------
    def named_params(self):
        out = {"src_emb": self.src_emb, "tgt_emb": self.tgt_emb}
        for layer in self.enc_layers + self.dec_layers:
            for name, t in layer.named_params():
                out[name] = t
        for part in (self.enc_ln, self.dec_ln, self.out_proj):
            for name, t in part.named_params():
                out[name] = t
        return out

    def expert_layer_keys(self):
        return [f"enc.{i}" for i in range(len(self.enc_layers))] + [
            f"dec.{i}" for i in range(len(self.dec_layers))
        ]

    # -- forward ----------------------------------------------------------
    def _check_ids(self, ids, vocab, what):
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ad.ShapeError(f"{what} ids must be [batch, seq], got shape {ids.shape}")
        if ids.shape[1] > self.config.max_seq_len:
            raise ValueError(
                f"{what} length {ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ValueError(f"{what} ids out of range [0, {vocab})")
        return ids

    def _embed(self, table, ids, s):
        x = ad.scale(ad.embedding_lookup(table, ids), math.sqrt(self.config.d_model))
        return ad.add(x, ad.tensor(self.positions[:s]))

    def encode(self, src_ids, ctx, pad_id=0):
        src_ids = self._check_ids(src_ids, self.config.vocab_src, "source")
        b, s = src_ids.shape
        src_keep = src_ids != pad_id
        attn_keep = src_keep[:, None, None, :]
        x = self._embed(self.src_emb, src_ids, s)
        for i, layer in enumerate(self.enc_layers):
            x = layer.forward(x, attn_keep, src_keep, ctx, f"enc.{i}")
        return self.enc_ln(x), src_keep

    def decode(self, tgt_in_ids, enc_out, src_keep, ctx, pad_id=0):
        tgt_in_ids = self._check_ids(tgt_in_ids, self.config.vocab_tgt, "target")
        b, s = tgt_in_ids.shape
        tgt_keep = tgt_in_ids != pad_id
        causal = np.tril(np.ones((s, s), dtype=bool))
        self_keep = causal[None, None, :, :] & tgt_keep[:, None, None, :]
        cross_keep = src_keep[:, None, None, :]
        x = self._embed(self.tgt_emb, tgt_in_ids, s)
        for i, layer in enumerate(self.dec_layers):
            x = layer.forward(x, enc_out, self_keep, cross_keep, tgt_keep, ctx, f"dec.{i}")
        return self.out_proj(self.dec_ln(x))

    def forward(self, src_ids, tgt_in_ids, ctx, pad_id=0):
        enc_out, src_keep = self.encode(src_ids, ctx, pad_id=pad_id)
        return self.decode(tgt_in_ids, enc_out, src_keep, ctx, pad_id=pad_id)
