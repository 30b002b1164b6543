import json
import os

import numpy as np
import pytest

from moelab.checkpoint import (
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from moelab.cli import main
from moelab.config import RunConfig, apply_overrides
from moelab.presets import get_preset, preset_names
from moelab.runner import analyze_routing, build_model, sweep_alpha, train_run
from moelab.tasks import generate_dataset
from moelab.training import AdamOptimizer


def micro_config(run_dir, preset="thor-tiny-cipher", steps=24, **overrides):
    cfg = get_preset(preset)
    items = [
        f"run_dir={run_dir}",
        f"training.total_steps={steps}",
        "training.warmup_steps=8",
        "val_interval=12",
        "telemetry_interval=8",
        "task.train_size=120",
        "task.valid_size=24",
        "task.test_size=24",
    ] + [f"{k}={v}" for k, v in overrides.items()]
    return apply_overrides(cfg, items)


@pytest.fixture(scope="module")
def thor_run(tmp_path_factory):
    run_dir = str(tmp_path_factory.mktemp("runs") / "thor")
    cfg = micro_config(run_dir)
    result = train_run(cfg)
    return cfg, result


# ---------------------------------------------------------------- config
def test_every_preset_round_trips():
    for name in preset_names():
        cfg = get_preset(name)
        assert RunConfig.from_json(cfg.to_json()) == cfg, name


def test_unknown_preset_is_an_error():
    with pytest.raises(ValueError, match="unknown preset"):
        get_preset("thor-enormous")


def test_objective_requires_matching_mode():
    cfg = get_preset("thor-tiny-cipher")
    with pytest.raises(ValueError, match="routing mode"):
        apply_overrides(cfg, ["routing.mode=dense"])


def test_vocab_must_cover_task_alphabet():
    cfg = get_preset("thor-tiny-cipher")
    with pytest.raises(ValueError, match="vocab"):
        apply_overrides(cfg, ["task.vocab_size=40"])


def test_override_parses_json_values():
    cfg = get_preset("thor-tiny-cipher")
    out = apply_overrides(cfg, ["training.alpha=2.5", "decode.mode=ensemble", "training.seed=7"])
    assert out.training.alpha == 2.5
    assert out.decode.mode == "ensemble"
    assert out.training.seed == 7
    # original untouched
    assert cfg.training.alpha == 5.0


def test_override_rejects_unknown_path():
    cfg = get_preset("thor-tiny-cipher")
    with pytest.raises(ValueError, match="unknown config path"):
        apply_overrides(cfg, ["training.learning=1"])
    with pytest.raises(ValueError, match="section.field=value"):
        apply_overrides(cfg, ["training.alpha"])


def test_run_root_env_reroots_relative_dirs(monkeypatch):
    cfg = get_preset("thor-tiny-cipher")
    monkeypatch.setenv("MOELAB_RUN_ROOT", "/elsewhere")
    assert cfg.resolved_run_dir() == "/elsewhere/runs/thor-tiny-cipher"
    monkeypatch.delenv("MOELAB_RUN_ROOT")
    assert cfg.resolved_run_dir() == "runs/thor-tiny-cipher"


# ---------------------------------------------------------------- checkpoint
def test_checkpoint_byte_identity(thor_run, tmp_path):
    cfg, _ = thor_run
    first = os.path.join(cfg.run_dir, "final.ckpt")
    snap = load_checkpoint(first)
    model = build_model(snap["config"])
    restore_model(model, snap)
    opt = AdamOptimizer(model.named_params(), beta1=cfg.training.beta1,
                        beta2=cfg.training.beta2, eps=cfg.training.adam_eps)
    restore_optimizer(opt, snap)
    second = str(tmp_path / "resaved.ckpt")
    save_checkpoint(second, model, opt, snap["step"], snap["rng"], snap["config"])
    with open(first, "rb") as a, open(second, "rb") as b:
        assert a.read() == b.read()


def test_checkpoint_restores_exact_params(thor_run):
    cfg, _ = thor_run
    snap = load_checkpoint(os.path.join(cfg.run_dir, "final.ckpt"))
    model = build_model(snap["config"])
    restore_model(model, snap)
    for name, t in model.named_params().items():
        np.testing.assert_array_equal(t.data, snap["tensors"][name])


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b"something else entirely\n")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(str(path))


def test_restore_shape_mismatch_names_param(thor_run):
    cfg, _ = thor_run
    snap = load_checkpoint(os.path.join(cfg.run_dir, "final.ckpt"))
    bigger = apply_overrides(cfg, ["model.d_ff=128"])
    model = build_model(bigger)
    with pytest.raises(ValueError, match="shape mismatch"):
        restore_model(model, snap)


def test_resume_reproduces_loss_sequence(tmp_path):
    full_dir = str(tmp_path / "full")
    half_dir = str(tmp_path / "half")
    train_run(micro_config(full_dir, steps=20))
    train_run(micro_config(half_dir, steps=10))
    resumed = apply_overrides(micro_config(half_dir, steps=10), ["training.total_steps=20"])
    train_run(resumed, resume=os.path.join(half_dir, "final.ckpt"))

    with open(os.path.join(full_dir, "metrics.jsonl")) as f:
        full = [json.loads(line) for line in f]
    with open(os.path.join(half_dir, "metrics.jsonl")) as f:
        halves = [json.loads(line) for line in f]
    assert len(full) == len(halves) == 20
    assert full == halves


def test_resume_rejects_different_config(thor_run, tmp_path):
    cfg, _ = thor_run
    other = micro_config(str(tmp_path / "other"))
    other = apply_overrides(other, ["training.alpha=1.0"])
    with pytest.raises(ValueError, match="different config"):
        train_run(other, resume=os.path.join(cfg.run_dir, "final.ckpt"))


# ---------------------------------------------------------------- run artifacts
def test_metrics_fields_and_algebra(thor_run):
    cfg, _ = thor_run
    with open(os.path.join(cfg.run_dir, "metrics.jsonl")) as f:
        rows = [json.loads(line) for line in f]
    assert len(rows) == cfg.training.total_steps
    for row in rows:
        assert set(row) == {"step", "ce1", "ce2", "cr", "aux", "total", "lr"}
        assert row["cr"] >= -1e-9
        expected = row["ce1"] + row["ce2"] + cfg.training.alpha * row["cr"]
        assert abs(row["total"] - expected) < 1e-9


def test_telemetry_rows_shape(thor_run):
    cfg, _ = thor_run
    with open(os.path.join(cfg.run_dir, "telemetry.jsonl")) as f:
        rows = [json.loads(line) for line in f]
    assert rows, "telemetry should be emitted at the configured interval"
    layers = {r["layer"] for r in rows}
    assert layers == {"enc.0", "enc.1", "dec.0", "dec.1"}
    for row in rows:
        assert set(row) == {"step", "layer", "loads", "confidences"}
        assert row["step"] % cfg.telemetry_interval == 0
        assert abs(sum(row["loads"]) - 1.0) < 1e-9
        assert row["confidences"] is None  # gate-free preset


def test_best_checkpoint_tracks_val(thor_run):
    cfg, _ = thor_run
    assert os.path.exists(os.path.join(cfg.run_dir, "best.ckpt"))
    with open(os.path.join(cfg.run_dir, "val.jsonl")) as f:
        vals = [json.loads(line) for line in f]
    assert all(set(v) == {"step", "bleu", "exact_match"} for v in vals)


# ---------------------------------------------------------------- analyze-routing
def _write_telemetry(run_dir, rows):
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "telemetry.jsonl"), "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def test_analyze_flags_collapse(tmp_path):
    run_dir = str(tmp_path / "collapsed")
    rows = [
        {"step": s, "layer": "enc.0", "loads": [0.96, 0.04], "confidences": [0.97, 0.55]}
        for s in range(10, 60, 10)
    ]
    _write_telemetry(run_dir, rows)
    report = analyze_routing(run_dir, window=3)
    assert report["collapse"] is True
    assert report["collapse_layers"] == ["enc.0"]


def test_analyze_flags_random_routing(tmp_path):
    run_dir = str(tmp_path / "randomish")
    rows = [
        {"step": s, "layer": "enc.0", "loads": [0.5, 0.5], "confidences": [0.51, 0.5]}
        for s in range(10, 60, 10)
    ]
    _write_telemetry(run_dir, rows)
    report = analyze_routing(run_dir, window=3, uniform_delta=0.05)
    assert report["random_routing"] is True
    assert report["collapse"] is False


def test_analyze_healthy_run_raises_no_flags(thor_run):
    cfg, _ = thor_run
    report = analyze_routing(cfg.run_dir, window=2)
    assert report["collapse"] is False
    assert report["random_routing"] is False  # no confidences to match


def test_analyze_missing_telemetry_errors(tmp_path):
    with pytest.raises(ValueError, match="telemetry"):
        analyze_routing(str(tmp_path / "nothing-here"))


# ---------------------------------------------------------------- cli verbs
def test_cli_list_presets(capsys):
    assert main(["list-presets"]) == 0
    out = capsys.readouterr().out
    for name in preset_names():
        assert name in out


def test_cli_eval_self_test(thor_run, capsys):
    cfg, _ = thor_run
    ckpt = os.path.join(cfg.run_dir, "final.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--self-test"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["bleu"] == 100.0


def test_cli_eval_modes(thor_run, capsys):
    cfg, _ = thor_run
    ckpt = os.path.join(cfg.run_dir, "final.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--mode", "ensemble",
                 "--split", "valid", "--token-budget", "256"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {"bleu", "exact_match", "flops_total", "flops_experts"} <= set(report)
    assert report["mode"] == "ensemble"


def test_cli_variance_reproducible(thor_run, capsys):
    cfg, _ = thor_run
    ckpt = os.path.join(cfg.run_dir, "final.ckpt")
    args = ["variance", "--checkpoint", ckpt, "--seeds", "0,1,2", "--token-budget", "256"]
    assert main(args) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(args) == 0
    second = json.loads(capsys.readouterr().out)
    assert first == second
    assert len(first["scores"]) == 3


def test_cli_error_reporting(capsys):
    assert main(["train", "--preset", "no-such-preset"]) == 1
    err = capsys.readouterr().err
    assert "unknown preset" in err


def test_cli_gen_data_round_trip(tmp_path, capsys):
    out_dir = str(tmp_path / "data")
    assert main(["gen-data", "--task", "cipher_translation", "--out", out_dir,
                 "--train-size", "30", "--valid-size", "10", "--test-size", "10",
                 "--vocab-size", "12", "--seed", "4"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["sizes"] == {"train": 30, "valid": 10, "test": 10}

    from moelab.tasks import SyntheticTaskSpec

    spec = SyntheticTaskSpec(kind="cipher_translation", vocab_size=12, min_len=4,
                             max_len=10, train_size=30, valid_size=10, test_size=10, seed=4)
    data = generate_dataset(spec)
    for split in ("train", "valid", "test"):
        with open(os.path.join(out_dir, f"{split}.src")) as f:
            src_lines = [tuple(int(t) for t in line.split()) for line in f]
        with open(os.path.join(out_dir, f"{split}.tgt")) as f:
            tgt_lines = [tuple(int(t) for t in line.split()) for line in f]
        assert src_lines == [tuple(s) for s, _ in data[split]]
        assert tgt_lines == [tuple(t) for _, t in data[split]]


def test_sweep_alpha_rows(tmp_path):
    base = micro_config(str(tmp_path / "sweep"), steps=8, **{"task.train_size": 60})
    rows = sweep_alpha(base, [0.0, 4.0])
    assert [r["alpha"] for r in rows] == [0.0, 4.0]
    for row in rows:
        assert os.path.exists(os.path.join(row["run_dir"], "final.ckpt"))
