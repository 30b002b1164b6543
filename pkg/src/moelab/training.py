"""Training objectives and the optimizer.

The two-pass objective runs the model twice on the same batch, once per
sampled expert (the pair comes from the routing plan), and couples the
passes with a symmetric KL consistency term:

    total = ce1 + ce2 + alpha * 0.5 * (KL(p1 || p2) + KL(p2 || p1))

Ablation variants zero individual terms; baseline objectives do a single
pass with plain cross entropy, optionally plus the gate load-balancing
penalty. Every step reports a LossBreakdown whose fields add up to the
total exactly.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .kernels import adam_step
from .routing import thor_select

OBJECTIVES = ("THOR_full", "CE1_CR", "CE1_CE2", "CE1_only", "Baseline_CE", "Switch_CE_plus_aux")
TWO_PASS = ("THOR_full", "CE1_CR", "CE1_CE2")


@dataclass
class TrainingConfig:
    objective: str = "THOR_full"
    alpha: float = 5.0
    learning_rate: float = 3e-3
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    batch_token_budget: int = 256
    total_steps: int = 1200
    seed: int = 0
    label_smoothing: float = 0.1
    aux_coefficient: float = 0.01

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}, expected one of {OBJECTIVES}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.total_steps < 1 or self.warmup_steps < 1:
            raise ValueError("total_steps and warmup_steps must be >= 1")


@dataclass
class LossBreakdown:
    ce1: float = 0.0
    ce2: float = 0.0
    cr: float = 0.0
    aux: float = 0.0
    total: float = 0.0


def learning_rate(peak, warmup_steps, step):
    """Linear warmup to ``peak`` then inverse square-root decay."""
    step = max(int(step), 1)
    return peak * min(step / warmup_steps, math.sqrt(warmup_steps / step))


class AdamOptimizer:
    """Bias-corrected Adam over a named parameter dict.

    Moments and step counts are tracked per parameter, and a parameter
    only advances when it received a gradient, so experts skipped by a
    routing draw keep their optimizer state unchanged.
    """

    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {name: np.zeros(t.data.size) for name, t in params.items()}
        self.v = {name: np.zeros(t.data.size) for name, t in params.items()}
        self.t = {name: 0 for name in params}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self, lr):
        for name, tsr in self.params.items():
            if tsr.grad is None:
                continue
            self.t[name] += 1
            k = self.t[name]
            adam_step(
                tsr.data.reshape(-1),
                np.ascontiguousarray(tsr.grad.reshape(-1)),
                self.m[name],
                self.v[name],
                lr,
                self.beta1,
                self.beta2,
                self.eps,
                1.0 - self.beta1**k,
                1.0 - self.beta2**k,
            )

    def state(self):
        return {
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
            "t": dict(self.t),
        }

    def load_state(self, state):
        for k in self.m:
            self.m[k][:] = state["m"][k]
            self.v[k][:] = state["v"][k]
            self.t[k] = int(state["t"][k])


def _ce(logits, targets, label_smoothing):
    from .tasks import PAD_ID

    return ad.cross_entropy(logits, targets, pad_id=PAD_ID, label_smoothing=label_smoothing)


def _flat_probs(logits):
    b, s, v = logits.data.shape
    return ad.softmax(ad.reshape(logits, (b * s, v)), axis=-1)


def symmetric_kl(logits1, logits2, row_mask):
    p1 = _flat_probs(logits1)
    p2 = _flat_probs(logits2)
    return ad.scale(
        ad.add(ad.kl_divergence(p1, p2, row_mask=row_mask), ad.kl_divergence(p2, p1, row_mask=row_mask)),
        0.5,
    )


def _make_ctx(plan, dropout_rng):
    from .model import ForwardContext

    return ForwardContext(training=True, dropout_rng=dropout_rng, plan=plan, telemetry=None, aux=None)


def two_pass_step(
    model,
    batch,
    variant,
    alpha,
    route_rng,
    dropout_rng,
    label_smoothing=0.0,
    optimizer=None,
    lr=0.0,
    telemetry=None,
    plan_pair=None,
):
    """THOR_full / CE1_CR / CE1_CE2: two sampled-expert passes on one batch.

    plan_pair overrides the random pair draw (used to force i=j in tests).
    """
    if variant not in TWO_PASS:
        raise ValueError(f"unknown two-pass variant {variant!r}")
    if model.routing.mode != "thor":
        raise ValueError(f"two-pass objectives need thor routing, model uses {model.routing.mode!r}")
    n = model.routing.n_experts
    keys = model.expert_layer_keys()
    if plan_pair is None:
        pairs = thor_select(route_rng, keys, n, count=2)
    else:
        pairs = plan_pair
    plan1 = {k: pairs[k][0] for k in keys}
    plan2 = {k: pairs[k][1] for k in keys}

    ctx1 = _make_ctx(plan1, dropout_rng)
    ctx1.telemetry = telemetry
    logits1 = model.forward(batch.source, batch.target_in, ctx1)
    ce1 = _ce(logits1, batch.target_out, label_smoothing)

    ctx2 = _make_ctx(plan2, dropout_rng)  # dropout resampled, same stream
    ctx2.telemetry = telemetry
    logits2 = model.forward(batch.source, batch.target_in, ctx2)
    ce2 = _ce(logits2, batch.target_out, label_smoothing)

    breakdown = LossBreakdown(ce1=ce1.item(), ce2=ce2.item())
    if variant == "CE1_CE2":
        total = ad.add(ce1, ce2)
    else:
        cr = symmetric_kl(logits1, logits2, batch.tgt_keep.reshape(-1))
        breakdown.cr = cr.item()
        base = ce1 if variant == "CE1_CR" else ad.add(ce1, ce2)
        if variant == "CE1_CR":
            breakdown.ce2 = 0.0
        # alpha == 0 adds nothing; skipping the node keeps the graph
        # identical to the plain two-CE objective
        total = ad.add(base, ad.scale(cr, alpha)) if alpha != 0.0 else base
    breakdown.total = total.item()

    if optimizer is not None:
        optimizer.zero_grad()
        ad.backward(total)
        optimizer.step(lr)
    return breakdown


def thor_training_step(model, batch, alpha, route_rng, dropout_rng, **kw):
    return two_pass_step(model, batch, "THOR_full", alpha, route_rng, dropout_rng, **kw)


def ablation_step(model, batch, variant, alpha, route_rng, dropout_rng, **kw):
    """CE1_CR / CE1_CE2 keep the two-pass machinery; CE1_only is one pass."""
    if variant in ("CE1_CR", "CE1_CE2"):
        return two_pass_step(model, batch, variant, alpha, route_rng, dropout_rng, **kw)
    if variant != "CE1_only":
        raise ValueError(f"unknown ablation variant {variant!r}")
    label_smoothing = kw.pop("label_smoothing", 0.0)
    optimizer = kw.pop("optimizer", None)
    lr = kw.pop("lr", 0.0)
    telemetry = kw.pop("telemetry", None)
    if kw:
        raise TypeError(f"unexpected arguments {sorted(kw)}")
    if model.routing.mode != "thor":
        raise ValueError(f"single-sample ablation needs thor routing, model uses {model.routing.mode!r}")
    plan = thor_select(route_rng, model.expert_layer_keys(), model.routing.n_experts, count=1)
    ctx = _make_ctx(plan, dropout_rng)
    ctx.telemetry = telemetry
    logits = model.forward(batch.source, batch.target_in, ctx)
    ce1 = _ce(logits, batch.target_out, label_smoothing)
    breakdown = LossBreakdown(ce1=ce1.item(), total=ce1.item())
    if optimizer is not None:
        optimizer.zero_grad()
        ad.backward(ce1)
        optimizer.step(lr)
    return breakdown


def baseline_step(
    model,
    batch,
    dropout_rng,
    label_smoothing=0.0,
    aux_coefficient=0.0,
    use_aux=False,
    optimizer=None,
    lr=0.0,
    telemetry=None,
    route_rng=None,
):
    """Single-pass cross entropy, optionally plus the load-balancing term."""
    from .model import ForwardContext

    aux_list = [] if use_aux else None
    ctx = ForwardContext(
        training=True,
        dropout_rng=dropout_rng,
        route_rng=route_rng,
        plan=None,
        telemetry=telemetry,
        aux=aux_list,
    )
    logits = model.forward(batch.source, batch.target_in, ctx)
    ce1 = _ce(logits, batch.target_out, label_smoothing)
    breakdown = LossBreakdown(ce1=ce1.item())
    total = ce1
    if use_aux and aux_list:
        aux = ad.scale(aux_list[0], 1.0 / len(aux_list))
        for term in aux_list[1:]:
            aux = ad.add(aux, ad.scale(term, 1.0 / len(aux_list)))
        breakdown.aux = aux.item()
        # coefficient zero contributes nothing; leaving the node out keeps
        # the graph identical to plain cross-entropy training
        if aux_coefficient != 0.0:
            total = ad.add(total, ad.scale(aux, aux_coefficient))
    breakdown.total = total.item()
    if optimizer is not None:
        optimizer.zero_grad()
        ad.backward(total)
        optimizer.step(lr)
    return breakdown


def run_training_step(model, batch, config: TrainingConfig, step, route_rng, dropout_rng, optimizer, telemetry=None):
    """Dispatch one optimization step for the configured objective."""
    lr = learning_rate(config.learning_rate, config.warmup_steps, step)
    common = dict(
        label_smoothing=config.label_smoothing,
        optimizer=optimizer,
        lr=lr,
        telemetry=telemetry,
    )
    obj = config.objective
    alpha = config.alpha
    if obj == "THOR_full":
        return thor_training_step(model, batch, alpha, route_rng, dropout_rng, **common)
    if obj in ("CE1_CR", "CE1_CE2", "CE1_only"):
        return ablation_step(model, batch, obj, alpha, route_rng, dropout_rng, **common)
    if obj == "Baseline_CE":
        return baseline_step(model, batch, dropout_rng, route_rng=route_rng, **common)
    return baseline_step(
        model,
        batch,
        dropout_rng,
        aux_coefficient=config.aux_coefficient,
        use_aux=True,
        route_rng=route_rng,
        **common,
    )


def prediction_variance(model, eval_pairs, seeds, decode_config, token_budget=512):
    """Variance of the corpus score and of per-token reference probabilities
    across repeated stochastic-routing evaluations.

    Each seed drives one full evaluation; a single-expert model comes out
    with exactly zero variance.
    """
    from .inference import evaluate, reference_token_probs

    if len(seeds) < 2:
        raise ValueError(f"need at least 2 seeds, got {len(seeds)}")
    scores = []
    prob_runs = []
    for seed in seeds:
        cfg_i = decode_config.with_seed(seed)
        report = evaluate(model, eval_pairs, cfg_i, token_budget=token_budget)
        scores.append(report["bleu"])
        prob_runs.append(reference_token_probs(model, eval_pairs, cfg_i, token_budget=token_budget))
    probs = np.stack(prob_runs)  # [R, n_tokens]
    # shift by the first run before np.var so identical runs give exactly 0
    return {
        "scores": scores,
        "score_variance": float(np.var(np.asarray(scores) - scores[0])),
        "token_prob_variance": float(np.var(probs - probs[0], axis=0).mean()),
    }
