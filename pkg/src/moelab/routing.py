"""Expert feed-forward layers and the schemes that pick which expert runs.

An expert layer holds N parallel FFNs. How inputs reach them is set by the
routing mode:

  dense            single FFN, no routing (N must be 1 for a vanilla model)
  gated_topk       learned gate, each token mixes its top-K experts
  switch_token     learned gate, each token goes to its argmax expert
  switch_sentence  learned gate on the sentence mean, whole sentence together
  switch_random    each token goes to a uniformly random expert, no gate
  thor             expert choices come from an externally supplied plan
                   (one index per layer, per sentence, per token, or "all"
                   to average every expert)

Plans map layer keys to choices so a caller can fix, replay, or sweep the
random decisions. Telemetry fragments record who got routed where; FLOPs of
the expert FFNs are tracked under the "experts" scope so dispatch cost can
be compared across expert counts.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import flops

GATED_MODES = ("gated_topk", "switch_token", "switch_sentence")
ALL_MODES = ("dense",) + GATED_MODES + ("switch_random", "thor")


@dataclass
class RoutingConfig:
    mode: str = "dense"
    n_experts: int = 1
    top_k: int = 1

    def __post_init__(self):
        if self.mode not in ALL_MODES:
            raise ValueError(f"unknown routing mode {self.mode!r}, expected one of {ALL_MODES}")
        if self.n_experts < 1:
            raise ValueError(f"n_experts must be >= 1, got {self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k must be in [1, {self.n_experts}], got {self.top_k}")

    @property
    def gated(self):
        return self.mode in GATED_MODES


class ExpertFFN:
    """Two-layer relu feed-forward block; output shape equals input shape."""

    def __init__(self, d_model, d_ff, rng, name):
        r = rng.derive(name)  # stream per component, independent of build order
        self.w1 = ad.tensor(r.normal(0.02, (d_model, d_ff)), requires_grad=True, name=f"{name}.w1")
        self.b1 = ad.tensor(np.zeros(d_ff), requires_grad=True, name=f"{name}.b1")
        self.w2 = ad.tensor(r.normal(0.02, (d_ff, d_model)), requires_grad=True, name=f"{name}.w2")
        self.b2 = ad.tensor(np.zeros(d_model), requires_grad=True, name=f"{name}.b2")

    def __call__(self, x):
        # every expert evaluation is accounted to the "experts" flop scope
        with flops.scope("experts"):
            h = ad.relu(ad.add(ad.matmul(x, self.w1), self.b1))
            return ad.add(ad.matmul(h, self.w2), self.b2)

    def named_params(self):
        for t in (self.w1, self.b1, self.w2, self.b2):
            yield t.name, t


def gate_scores(x, gate_w):
    """Per-expert routing probabilities: row softmax of x @ gate_w^T."""
    if gate_w is None:
        raise ValueError("gate weights missing: this routing mode carries no gate")
    with flops.scope("router"):
        return ad.softmax(ad.matmul(x, ad.transpose(gate_w, (1, 0))), axis=-1)


def thor_select(rng, layer_keys, n_experts, count):
    """Random expert choices per layer: a pair, a single index, or "all"."""
    if count == "all":
        return {k: "all" for k in layer_keys}
    if count == 2:
        return {k: rng.pair_without_replacement(n_experts) for k in layer_keys}
    if count == 1:
        return {k: int(rng.integers(0, n_experts)) for k in layer_keys}
    raise ValueError(f"count must be 1, 2, or 'all', got {count!r}")


def load_balancing_loss(assignments, gate_values):
    """N * sum_i f_i * P_i over the given units.

    f_i is the fraction of units whose top choice is expert i (constant),
    P_i the mean gate probability of expert i (differentiable). Uniform
    routing gives exactly 1.0; total collapse onto one expert gives N.
    """
    if gate_values is None:
        raise ValueError("load balancing loss needs gate values")
    u, n = gate_values.data.shape
    if u == 0:
        raise ValueError("load balancing loss over zero routed units")
    f = np.bincount(np.asarray(assignments), minlength=n) / u
    p_mean = ad.sum_axis(ad.scale(gate_values, 1.0 / u), axis=0)
    return ad.scale(ad.sum_all(ad.mul(p_mean, ad.tensor(f))), float(n))


def record_telemetry(fragments):
    """Aggregate per-layer fragments into loads and mean confidences.

    Returns a list of {layer, loads, confidences} sorted by layer key;
    confidences is None for gateless modes and holds None per expert that
    received no units.
    """
    if not fragments:
        raise ValueError("no telemetry fragments to aggregate")
    by_layer = {}
    for fr in fragments:
        agg = by_layer.setdefault(fr["layer"], {"counts": None, "conf": None})
        if agg["counts"] is None:
            agg["counts"] = fr["counts"].astype(np.int64).copy()
        else:
            agg["counts"] += fr["counts"]
        if fr.get("conf") is not None:
            if agg["conf"] is None:
                agg["conf"] = np.zeros(len(fr["counts"]))
            agg["conf"] += fr["conf"]
    records = []
    for layer in sorted(by_layer):
        agg = by_layer[layer]
        total = int(agg["counts"].sum())
        if total == 0:
            raise ValueError(f"no routed units recorded for layer {layer!r}")
        confs = None
        if agg["conf"] is not None:
            confs = [
                float(c / k) if k > 0 else None
                for c, k in zip(agg["conf"], agg["counts"])
            ]
        records.append({"layer": layer, "loads": (agg["counts"] / total).tolist(), "confidences": confs})
    return records


class ExpertLayer:
    """The feed-forward sublayer of a transformer block, with N experts."""

    def __init__(self, d_model, d_ff, routing: RoutingConfig, rng, name):
        self.routing = routing
        self.name = name
        self.experts = [
            ExpertFFN(d_model, d_ff, rng, f"{name}.expert{e}") for e in range(routing.n_experts)
        ]
        self.gate_w = None
        if routing.gated:
            self.gate_w = ad.tensor(
                rng.derive(f"{name}.gate").normal(0.02, (routing.n_experts, d_model)),
                requires_grad=True,
                name=f"{name}.gate",
            )

    def named_params(self):
        for e in self.experts:
            yield from e.named_params()
        if self.gate_w is not None:
            yield self.gate_w.name, self.gate_w

    def forward(self, x, unit_keep, ctx, layer_key):
        """x: [B, S, d]; unit_keep: bool [B, S] marking real (non-pad) tokens."""
        mode = self.routing.mode
        if mode == "dense":
            return self.experts[0](x)
        if mode in ("thor", "switch_random"):
            return self._route_planned(x, unit_keep, ctx, layer_key)
        if mode == "switch_sentence":
            return self._route_sentence(x, unit_keep, ctx, layer_key)
        return self._route_token(x, unit_keep, ctx, layer_key)

    # -- gate-free routing (plan-driven or uniformly random) -----------
    def _route_planned(self, x, unit_keep, ctx, layer_key):
        b, s, d = x.data.shape
        n = self.routing.n_experts
        entry = None if ctx.plan is None else ctx.plan.get(layer_key)
        if entry is None:
            if self.routing.mode == "thor":
                raise ValueError(f"routing plan has no entry for layer {layer_key!r}")
            if ctx.route_rng is None:
                raise ValueError("random routing needs a route rng when no plan is given")
            entry = ctx.route_rng.integers(0, n, size=(b, s))

        if isinstance(entry, str) and entry == "all":
            out = self.experts[0](x)
            for e in range(1, n):
                out = ad.add(out, self.experts[e](x))
            return ad.scale(out, 1.0 / n)

        if isinstance(entry, (int, np.integer)):
            e = int(entry)
            self._record(ctx, layer_key, np.full(int(unit_keep.sum()), e))
            return self.experts[e](x)

        entry = np.asarray(entry)
        if entry.shape == (b,):
            self._record(ctx, layer_key, entry)
            assign = np.repeat(entry, s)
        elif entry.shape == (b, s):
            self._record(ctx, layer_key, entry[unit_keep])
            assign = entry.reshape(-1)
        else:
            raise ValueError(
                f"plan entry for {layer_key!r} must be an index, 'all', [B], or [B,S]; got shape {entry.shape}"
            )
        flat = ad.reshape(x, (b * s, d))
        return ad.reshape(self._sparse_dispatch(flat, assign), (b, s, d))

    # -- learned gate, one decision per sentence ------------------------
    def _route_sentence(self, x, unit_keep, ctx, layer_key):
        b, s, d = x.data.shape
        n = self.routing.n_experts
        counts = unit_keep.sum(axis=1)
        weights = unit_keep / np.maximum(counts, 1)[:, None]
        sent = ad.sum_axis(ad.mul(x, ad.tensor(weights[:, :, None])), axis=1)
        gate = gate_scores(sent, self.gate_w)
        assign = np.argmax(gate.data, axis=1)

        with flops.scope("router"):
            onehot = np.zeros((b, n))
            onehot[np.arange(b), assign] = 1.0
            p_sel = ad.sum_axis(ad.mul(gate, ad.tensor(onehot)), axis=1, keepdims=True)

        flat = ad.reshape(x, (b * s, d))
        out = ad.reshape(self._sparse_dispatch(flat, np.repeat(assign, s)), (b, s, d))
        out = ad.mul(out, ad.reshape(p_sel, (b, 1, 1)))

        if ctx.aux is not None:
            ctx.aux.append(load_balancing_loss(assign, gate))
        self._record(ctx, layer_key, assign, gate.data[np.arange(b), assign])
        return out

    # -- learned gate, one decision per token ---------------------------
    def _route_token(self, x, unit_keep, ctx, layer_key):
        b, s, d = x.data.shape
        n = self.routing.n_experts
        k = self.routing.top_k if self.routing.mode == "gated_topk" else 1
        u = b * s

        flat = ad.reshape(x, (u, d))
        gate = gate_scores(flat, self.gate_w)
        # stable sort on the negated scores: ties break toward the lower index
        order = np.argsort(-gate.data, axis=1, kind="stable")[:, :k]

        # top-K mixture as K single-assignment dispatches, so expert cost
        # per token stays K experts' worth no matter how many exist
        out = None
        for j in range(k):
            col = order[:, j]
            with flops.scope("router"):
                onehot = np.zeros((u, n))
                onehot[np.arange(u), col] = 1.0
                gj = ad.sum_axis(ad.mul(gate, ad.tensor(onehot)), axis=1, keepdims=True)
            yj = ad.mul(self._sparse_dispatch(flat, col), gj)
            out = yj if out is None else ad.add(out, yj)
        out = ad.reshape(out, (b, s, d))

        assign = order[:, 0]
        valid = unit_keep.reshape(-1)
        if ctx.aux is not None:
            idx = np.nonzero(valid)[0]
            ctx.aux.append(load_balancing_loss(assign[idx], ad.gather_rows(gate, idx)))
        self._record(ctx, layer_key, assign[valid], gate.data[np.nonzero(valid)[0], assign[valid]])
        return out

    # -- shared sparse path ---------------------------------------------
    def _sparse_dispatch(self, flat, assign):
        """Evaluate each expert only on its rows and stitch results back.

        assign is [U], one expert per row. Rows are grouped per expert,
        each block runs through its expert, and the blocks are placed back
        by an inverse permutation. The stitching is pure data movement, so
        the forward cost equals running one expert over every row.
        """
        u = flat.data.shape[0]
        assign = np.asarray(assign)
        blocks = []
        row_order = []
        for e in range(self.routing.n_experts):
            idx = np.nonzero(assign == e)[0]
            if idx.size == 0:
                continue
            blocks.append(self.experts[e](ad.gather_rows(flat, idx)))
            row_order.append(idx)
        perm = np.concatenate(row_order)
        inv = np.empty(u, dtype=np.int64)
        inv[perm] = np.arange(u)
        return ad.gather_rows(ad.concat_rows(blocks), inv)

    def _record(self, ctx, layer_key, assign, confidences=None):
        """Append a telemetry fragment for the units in ``assign``."""
        if ctx.telemetry is None:
            return
        n = self.routing.n_experts
        counts = np.bincount(assign, minlength=n).astype(np.int64)
        conf = None
        if confidences is not None:
            conf = np.zeros(n)
            np.add.at(conf, assign, confidences)
        ctx.telemetry.append({"layer": layer_key, "counts": counts, "conf": conf})
