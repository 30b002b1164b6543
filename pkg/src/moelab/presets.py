"""Named experiment presets.

Every preset is a complete RunConfig for the desk-scale synthetic tasks;
each trains in well under 15 minutes on a laptop CPU. The cipher family
shares one task and model so runs differ only in routing and objective:

  vanilla-tiny-cipher     dense single-FFN baseline
  thor-tiny-cipher        stochastic expert pairs + consistency objective,
                          on a low-resource cipher (120 train sentences,
                          vocab 32, reorder window 2)
  thor-*-ce1cr/-ce1ce2/-ce1   loss-term ablations of the same model
  thor-n2/-n8-cipher      expert-count sweep; reports the capacity trend
                          without asserting its direction
  switch-no-balance       learned token gate, no balancing term
  switch-with-balance     same gate with the load-balancing term
  switch-sentence-cipher  gate decides once per sentence
  switch-random-cipher    gateless uniform token routing

Override any field at the CLI with --set, e.g. --set training.seed=3.
"""

from .config import RunConfig
from .inference import DecodeConfig
from .model import ModelConfig
from .routing import RoutingConfig
from .tasks import SyntheticTaskSpec
from .training import TrainingConfig


def _cipher_task():
    return SyntheticTaskSpec(
        kind="cipher_translation", vocab_size=20, min_len=4, max_len=10,
        train_size=600, valid_size=200, test_size=200, seed=0, reorder_window=1,
    )


def _lowres_cipher_task():
    # small train split + wider vocab: enough headroom below BLEU 100
    # for objective and inference-mode comparisons to mean something
    return SyntheticTaskSpec(
        kind="cipher_translation", vocab_size=32, min_len=5, max_len=12,
        train_size=120, valid_size=200, test_size=200, seed=0, reorder_window=2,
    )


def _copy_task():
    return SyntheticTaskSpec(
        kind="copy", vocab_size=20, min_len=4, max_len=10,
        train_size=600, valid_size=200, test_size=200, seed=0,
    )


def _tiny_model(vocab=24):
    return ModelConfig(
        d_model=32, n_heads=4, d_head=8, d_ff=64, n_enc_layers=2, n_dec_layers=2,
        vocab_src=vocab, vocab_tgt=vocab, dropout_rate=0.1, max_seq_len=32,
    )


def _training(objective, **kw):
    base = dict(
        objective=objective, alpha=5.0, learning_rate=3e-3, warmup_steps=100,
        beta1=0.9, beta2=0.98, adam_eps=1e-9, batch_token_budget=320,
        total_steps=900, seed=0, label_smoothing=0.1, aux_coefficient=0.01,
    )
    base.update(kw)
    return TrainingConfig(**base)


def _decode(**kw):
    # greedy by default at this scale; beam settings stay available per run
    base = dict(mode="dispatch_sentence", beam_size=1, length_penalty=1.0, max_decode_len=16, seed=0)
    base.update(kw)
    return DecodeConfig(**base)


def _run(name, routing, training, task=None, decode=None, model=None):
    return RunConfig(
        model=model or _tiny_model(),
        routing=routing,
        training=training,
        decode=decode or _decode(),
        task=task or _cipher_task(),
        run_dir=f"runs/{name}",
        telemetry_interval=50,
        val_interval=300,
    )


def _thor(n):
    return RoutingConfig(mode="thor", n_experts=n)


def _thor_run(name, objective, n_experts=4):
    return _run(
        name, _thor(n_experts), _training(objective, total_steps=1200),
        task=_lowres_cipher_task(), model=_tiny_model(vocab=36),
    )


_BUILDERS = {
    "vanilla-tiny-cipher": lambda: _run(
        "vanilla-tiny-cipher", RoutingConfig(mode="dense", n_experts=1), _training("Baseline_CE")),
    "vanilla-tiny-copy": lambda: _run(
        "vanilla-tiny-copy", RoutingConfig(mode="dense", n_experts=1),
        _training("Baseline_CE", total_steps=600), task=_copy_task()),
    "thor-tiny-cipher": lambda: _thor_run("thor-tiny-cipher", "THOR_full"),
    "thor-tiny-cipher-ce1cr": lambda: _thor_run("thor-tiny-cipher-ce1cr", "CE1_CR"),
    "thor-tiny-cipher-ce1ce2": lambda: _thor_run("thor-tiny-cipher-ce1ce2", "CE1_CE2"),
    "thor-tiny-cipher-ce1": lambda: _thor_run("thor-tiny-cipher-ce1", "CE1_only"),
    "thor-n2-cipher": lambda: _thor_run("thor-n2-cipher", "THOR_full", n_experts=2),
    "thor-n8-cipher": lambda: _thor_run("thor-n8-cipher", "THOR_full", n_experts=8),
    "switch-no-balance": lambda: _run(
        "switch-no-balance", RoutingConfig(mode="switch_token", n_experts=2),
        _training("Switch_CE_plus_aux", aux_coefficient=0.0)),
    "switch-with-balance": lambda: _run(
        "switch-with-balance", RoutingConfig(mode="switch_token", n_experts=2),
        _training("Switch_CE_plus_aux", aux_coefficient=0.01)),
    "switch-sentence-cipher": lambda: _run(
        "switch-sentence-cipher", RoutingConfig(mode="switch_sentence", n_experts=2),
        _training("Switch_CE_plus_aux", aux_coefficient=0.01)),
    "switch-random-cipher": lambda: _run(
        "switch-random-cipher", RoutingConfig(mode="switch_random", n_experts=2),
        _training("Baseline_CE")),
}

PRESET_NOTES = {
    "thor-n2-cipher": "expert-count sweep point; the capacity/overfitting trend is reported, not asserted",
    "thor-n8-cipher": "expert-count sweep point; the capacity/overfitting trend is reported, not asserted",
}


def preset_names():
    return sorted(_BUILDERS)


def get_preset(name):
    if name not in _BUILDERS:
        raise ValueError(f"unknown preset {name!r}; run list-presets to see the choices")
    return _BUILDERS[name]()
