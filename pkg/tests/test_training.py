import math

import numpy as np
import pytest

from moelab import autodiff as ad
from moelab.model import ForwardContext, ModelConfig, Seq2SeqTransformer
from moelab.rng import Rng
from moelab.routing import RoutingConfig
from moelab.tasks import SyntheticTaskSpec, batch_iterator, generate_dataset, make_batch
from moelab.training import (
    AdamOptimizer,
    LossBreakdown,
    TrainingConfig,
    ablation_step,
    baseline_step,
    learning_rate,
    run_training_step,
    thor_training_step,
    two_pass_step,
)


def tiny_model(mode="thor", n_experts=2, seed=3, **cfg):
    base = dict(
        d_model=8, n_heads=2, d_head=4, d_ff=16, n_enc_layers=1, n_dec_layers=1,
        vocab_src=11, vocab_tgt=11, dropout_rate=0.0, max_seq_len=12,
    )
    base.update(cfg)
    return Seq2SeqTransformer(ModelConfig(**base), RoutingConfig(mode=mode, n_experts=n_experts), Rng(seed, "init"))


def tiny_batch():
    return make_batch([([4, 5, 6], [6, 5, 4]), ([7, 8], [8, 7])])


def rngs(seed=0):
    return Rng(seed, "route"), Rng(seed, "dropout")


# ---------------------------------------------------------------- adam
def test_adam_first_step_is_lr():
    p = ad.tensor(np.array([1.0]), requires_grad=True, name="w")
    opt = AdamOptimizer({"w": p})
    p.grad = np.array([1.0])
    opt.step(0.1)
    # first-step bias-corrected update has magnitude ~= lr for eps << 1
    assert abs((1.0 - p.data[0]) - 0.1) < 1e-6


def test_adam_zero_grad_leaves_param():
    p = ad.tensor(np.array([2.5]), requires_grad=True, name="w")
    opt = AdamOptimizer({"w": p})
    p.grad = None
    opt.step(0.1)
    assert p.data[0] == 2.5
    assert opt.t["w"] == 0


def test_adam_three_step_hand_oracle():
    # minimize f(w) = w^2 from w=1; gradient 2w; hand-stepped reference
    beta1, beta2, eps, lr = 0.9, 0.98, 1e-9, 0.05
    w_ref, m, v = 1.0, 0.0, 0.0
    for t in range(1, 4):
        g = 2 * w_ref
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        w_ref -= lr * mhat / (math.sqrt(vhat) + eps)

    p = ad.tensor(np.array([1.0]), requires_grad=True, name="w")
    opt = AdamOptimizer({"w": p}, beta1=beta1, beta2=beta2, eps=eps)
    for _ in range(3):
        p.grad = np.array([2 * p.data[0]])
        opt.step(lr)
    assert abs(p.data[0] - w_ref) < 1e-12


def test_adam_state_roundtrip():
    p = ad.tensor(np.array([1.0, 2.0]), requires_grad=True, name="w")
    opt = AdamOptimizer({"w": p})
    p.grad = np.array([0.5, -0.5])
    opt.step(0.01)
    state = opt.state()
    p2 = ad.tensor(p.data.copy(), requires_grad=True, name="w")
    opt2 = AdamOptimizer({"w": p2})
    opt2.load_state(state)
    p.grad = np.array([1.0, 1.0])
    p2.grad = np.array([1.0, 1.0])
    opt.step(0.01)
    opt2.step(0.01)
    np.testing.assert_array_equal(p.data, p2.data)


def test_learning_rate_schedule():
    peak = 1e-3
    assert learning_rate(peak, 100, 50) == pytest.approx(peak * 0.5)
    assert learning_rate(peak, 100, 100) == pytest.approx(peak)
    assert learning_rate(peak, 100, 400) == pytest.approx(peak * 0.5)
    assert learning_rate(peak, 100, 0) == learning_rate(peak, 100, 1)


# ---------------------------------------------------------------- config
def test_training_config_validation():
    with pytest.raises(ValueError, match="objective"):
        TrainingConfig(objective="nope")
    with pytest.raises(ValueError, match="alpha"):
        TrainingConfig(alpha=-1.0)


# ---------------------------------------------------------------- loss algebra
def test_forced_identical_pair_zeroes_cr():
    model = tiny_model()
    route, drop = rngs()
    pair = {k: (1, 1) for k in model.expert_layer_keys()}
    bd = thor_training_step(model, tiny_batch(), 5.0, route, drop, plan_pair=pair)
    assert bd.cr <= 1e-12
    assert abs(bd.total - 2 * bd.ce1) < 1e-9
    assert abs(bd.ce1 - bd.ce2) < 1e-12


def test_alpha_zero_total_is_ce_sum():
    model = tiny_model()
    route, drop = rngs()
    bd = thor_training_step(model, tiny_batch(), 0.0, route, drop)
    assert bd.total == bd.ce1 + bd.ce2


def test_loss_algebra_every_variant():
    batch = tiny_batch()
    for variant, alpha in [("THOR_full", 3.0), ("CE1_CR", 3.0), ("CE1_CE2", 0.0)]:
        model = tiny_model()
        route, drop = rngs()
        bd = two_pass_step(model, batch, variant, alpha, route, drop)
        assert abs(bd.total - (bd.ce1 + bd.ce2 + alpha * bd.cr)) < 1e-9, variant
        assert bd.cr >= -1e-9


def test_composition_oracle_total():
    """Whole-step total equals independently composed CE + CE + symmetric KL."""
    model = tiny_model(seed=7)
    batch = tiny_batch()
    keys = model.expert_layer_keys()
    pair = {k: (0, 1) for k in keys}
    alpha = 2.5
    bd = thor_training_step(model, batch, alpha, *rngs(), plan_pair=pair)

    def pass_logits(which):
        ctx = ForwardContext(training=False, plan={k: pair[k][which] for k in keys})
        return model.forward(batch.source, batch.target_in, ctx).data

    l1, l2 = pass_logits(0), pass_logits(1)

    def ce(logits):
        flat = logits.reshape(-1, logits.shape[-1])
        t = batch.target_out.reshape(-1)
        logp = flat - np.log(np.exp(flat - flat.max(1, keepdims=True)).sum(1, keepdims=True)) - flat.max(1, keepdims=True)
        sel = t != 0
        return float(-logp[np.arange(len(t)), t][sel].mean())

    def sym_kl(a, b):
        def sm(z):
            e = np.exp(z - z.max(-1, keepdims=True))
            return e / e.sum(-1, keepdims=True)

        pa = sm(a).reshape(-1, a.shape[-1])
        pb = sm(b).reshape(-1, b.shape[-1])
        sel = batch.target_in.reshape(-1) != 0
        ka = (pa * (np.log(pa) - np.log(pb))).sum(1)[sel].mean()
        kb = (pb * (np.log(pb) - np.log(pa))).sum(1)[sel].mean()
        return 0.5 * (ka + kb)

    expected = ce(l1) + ce(l2) + alpha * sym_kl(l1, l2)
    assert abs(bd.total - expected) < 1e-9


def test_cr_symmetry():
    model = tiny_model(seed=9)
    batch = tiny_batch()
    keys = model.expert_layer_keys()
    a = thor_training_step(model, batch, 1.0, *rngs(), plan_pair={k: (0, 1) for k in keys})
    b = thor_training_step(model, batch, 1.0, *rngs(), plan_pair={k: (1, 0) for k in keys})
    assert abs(a.cr - b.cr) < 1e-12


def test_ce1_ce2_equals_thor_alpha0_step_for_step():
    batch = tiny_batch()
    results = {}
    for objective in ("CE1_CE2", "THOR_full"):
        model = tiny_model(seed=4, dropout_rate=0.1)
        opt = AdamOptimizer(model.named_params())
        cfg = TrainingConfig(objective=objective, alpha=0.0, total_steps=5)
        route, drop = rngs(11)
        losses = []
        for step in range(1, 6):
            bd = run_training_step(model, batch, cfg, step, route, drop, opt)
            losses.append((bd.ce1, bd.ce2, bd.total))
        results[objective] = (losses, {k: t.data.copy() for k, t in model.named_params().items()})
    assert results["CE1_CE2"][0] == results["THOR_full"][0]
    for k in results["CE1_CE2"][1]:
        np.testing.assert_array_equal(results["CE1_CE2"][1][k], results["THOR_full"][1][k])


def test_ce1_only_breakdown():
    model = tiny_model()
    bd = ablation_step(model, tiny_batch(), "CE1_only", 5.0, *rngs())
    assert bd.ce2 == 0.0 and bd.cr == 0.0
    assert bd.total == bd.ce1


def test_ce1_cr_matches_composition():
    model = tiny_model(seed=6)
    batch = tiny_batch()
    alpha = 4.0
    bd = ablation_step(model, batch, "CE1_CR", alpha, *rngs())
    assert bd.ce2 == 0.0
    assert abs(bd.total - (bd.ce1 + alpha * bd.cr)) < 1e-9


def test_two_pass_rejects_gated_model():
    model = tiny_model(mode="switch_token")
    with pytest.raises(ValueError, match="thor"):
        thor_training_step(model, tiny_batch(), 1.0, *rngs())


# ---------------------------------------------------------------- baselines
def test_switch_aux_uniform_contribution():
    model = tiny_model(mode="switch_token", n_experts=2)
    for layer in [l.experts for l in model.enc_layers + model.dec_layers]:
        layer.gate_w.data[:] = 0.0  # uniform gate, f collapses to expert 0 on ties
    bd = baseline_step(model, tiny_batch(), Rng(0, "drop"), aux_coefficient=0.01, use_aux=True)
    # uniform gate: P_i = 1/N so aux = N * sum f_i * (1/N) = 1 regardless of f
    assert bd.aux == pytest.approx(1.0, abs=1e-12)
    assert bd.total == pytest.approx(bd.ce1 + 0.01 * 1.0, abs=1e-12)


def test_aux_coefficient_zero_is_baseline_bitwise():
    batch = tiny_batch()
    runs = {}
    for use_aux in (False, True):
        model = tiny_model(mode="switch_token", n_experts=2, seed=8, dropout_rate=0.1)
        opt = AdamOptimizer(model.named_params())
        drop = Rng(2, "drop")
        losses = []
        for step in range(1, 5):
            bd = baseline_step(
                model, batch, drop, label_smoothing=0.1,
                aux_coefficient=0.0, use_aux=use_aux, optimizer=opt, lr=1e-3,
            )
            losses.append(bd.total)
        runs[use_aux] = (losses, {k: t.data.copy() for k, t in model.named_params().items()})
    assert runs[False][0] == runs[True][0]
    for k in runs[False][1]:
        np.testing.assert_array_equal(runs[False][1][k], runs[True][1][k])


def test_vanilla_smoke_train_loss_decreases():
    spec = SyntheticTaskSpec(kind="copy", vocab_size=11, min_len=3, max_len=6, train_size=64, valid_size=8, test_size=8, seed=0)
    data = generate_dataset(spec)
    model = tiny_model(mode="dense", n_experts=1, seed=1, d_model=16, d_head=8, d_ff=32)
    opt = AdamOptimizer(model.named_params())
    cfg = TrainingConfig(objective="Baseline_CE", total_steps=500, warmup_steps=40, learning_rate=3e-3, label_smoothing=0.0)
    drop = Rng(0, "drop")
    losses = []
    step = 0
    while step < cfg.total_steps:
        for batch in batch_iterator(data["train"], 64, seed=step):
            step += 1
            bd = baseline_step(model, batch, drop, optimizer=opt, lr=learning_rate(cfg.learning_rate, cfg.warmup_steps, step))
            losses.append(bd.total)
            if step >= cfg.total_steps:
                break
    assert losses[-1] < losses[0]
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])


# ---------------------------------------------------------------- updates
def test_untouched_expert_unchanged_by_step():
    model = tiny_model(mode="thor", n_experts=3)
    opt = AdamOptimizer(model.named_params())
    before = {k: t.data.copy() for k, t in model.named_params().items() if ".expert2." in k}
    pair = {k: (0, 1) for k in model.expert_layer_keys()}
    thor_training_step(model, tiny_batch(), 1.0, *rngs(), plan_pair=pair, optimizer=opt, lr=1e-3)
    after = {k: t.data for k, t in model.named_params().items() if ".expert2." in k}
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])
    # shared parameters did move
    assert not np.array_equal(model.src_emb.data, tiny_model(mode="thor", n_experts=3).src_emb.data)


def test_training_determinism():
    def run():
        model = tiny_model(dropout_rate=0.1, seed=2)
        opt = AdamOptimizer(model.named_params())
        cfg = TrainingConfig(objective="THOR_full", alpha=2.0, total_steps=4)
        route, drop = rngs(5)
        out = []
        for step in range(1, 5):
            bd = run_training_step(model, tiny_batch(), cfg, step, route, drop, opt)
            out.append((bd.ce1, bd.ce2, bd.cr, bd.total))
        return out

    assert run() == run()
