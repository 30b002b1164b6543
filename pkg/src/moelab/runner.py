"""Drives full training and evaluation runs for the CLI.

A run directory accumulates:

  config.json      the RunConfig that produced the run
  metrics.jsonl    one record per step: step, ce1, ce2, cr, aux, total, lr
  telemetry.jsonl  routing loads/confidences every telemetry_interval steps
  val.jsonl        validation BLEU/exact-match every val_interval steps
  best.ckpt        checkpoint at the best validation BLEU
  final.ckpt       checkpoint after the last step

Training is a pure function of the config: data order, expert choices, and
dropout all come from streams seeded by it, and resuming from a checkpoint
replays the remaining steps bit for bit.
"""

import dataclasses
import json
import os

from .checkpoint import load_checkpoint, restore_model, restore_optimizer, save_checkpoint
from .inference import evaluate
from .model import Seq2SeqTransformer
from .rng import Rng
from .routing import record_telemetry
from .tasks import batch_iterator, generate_dataset
from .training import AdamOptimizer, run_training_step
from .config import RunConfig


def build_model(config: RunConfig) -> Seq2SeqTransformer:
    return Seq2SeqTransformer(config.model, config.routing, Rng(config.training.seed, "init"))


def _epoch_seed(base_seed, epoch):
    # distinct, deterministic batch-order seed per epoch
    return base_seed * 1_000_003 + epoch


def _append_jsonl(path, record):
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True))
        f.write("\n")


def _best_recorded_bleu(val_path):
    best = None
    if os.path.exists(val_path):
        with open(val_path, encoding="utf-8") as f:
            for line in f:
                row = json.loads(line)
                if best is None or row["bleu"] > best:
                    best = row["bleu"]
    return best


def train_run(config: RunConfig, resume=None, log=None):
    """Train to total_steps, emitting metrics and checkpoints under run_dir.

    resume: path to a checkpoint of the same config; training continues
    from its step with optimizer and rng state restored exactly.
    """
    run_dir = config.resolved_run_dir()
    os.makedirs(run_dir, exist_ok=True)
    config.save(os.path.join(run_dir, "config.json"))

    model = build_model(config)
    optimizer = AdamOptimizer(
        model.named_params(),
        beta1=config.training.beta1,
        beta2=config.training.beta2,
        eps=config.training.adam_eps,
    )
    route_rng = Rng(config.training.seed, "route-train")
    dropout_rng = Rng(config.training.seed, "dropout-train")
    start_step = 0

    if resume is not None:
        snap = load_checkpoint(resume)
        ours = config.to_dict()
        theirs = snap["config"].to_dict()
        # extending the step budget and relocating the run dir are fine;
        # anything else would break bit-exact resumption
        for d in (ours, theirs):
            d["training"]["total_steps"] = 0
            d["run_dir"] = ""
        if ours != theirs:
            raise ValueError("resume checkpoint was produced by a different config")
        restore_model(model, snap)
        restore_optimizer(optimizer, snap)
        route_rng = Rng.from_state(snap["rng"]["route"])
        dropout_rng = Rng.from_state(snap["rng"]["dropout"])
        start_step = snap["step"]

    data = generate_dataset(config.task)
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    telemetry_path = os.path.join(run_dir, "telemetry.jsonl")
    val_path = os.path.join(run_dir, "val.jsonl")
    best_bleu = _best_recorded_bleu(val_path)

    def save(name):
        save_checkpoint(
            os.path.join(run_dir, name),
            model,
            optimizer,
            step,
            {"route": route_rng.state(), "dropout": dropout_rng.state()},
            config,
        )

    def validate():
        nonlocal best_bleu
        report = evaluate(
            model, data["valid"], config.decode,
            token_budget=config.training.batch_token_budget,
        )
        _append_jsonl(val_path, {
            "step": step, "bleu": report["bleu"], "exact_match": report["exact_match"],
        })
        if log:
            log(f"step {step}: val bleu {report['bleu']:.2f}")
        if best_bleu is None or report["bleu"] > best_bleu:
            best_bleu = report["bleu"]
            save("best.ckpt")
        return report

    total = config.training.total_steps
    step = 0
    epoch = 0
    last_val = None
    while step < total:
        batches = batch_iterator(
            data["train"],
            config.training.batch_token_budget,
            seed=_epoch_seed(config.training.seed, epoch),
        )
        for batch in batches:
            if step >= total:
                break
            step += 1
            if step <= start_step:
                continue

            fragments = [] if step % config.telemetry_interval == 0 else None
            breakdown = run_training_step(
                model, batch, config.training, step, route_rng, dropout_rng,
                optimizer, telemetry=fragments,
            )
            lr = _step_lr(config.training, step)
            _append_jsonl(metrics_path, {
                "step": step, "ce1": breakdown.ce1, "ce2": breakdown.ce2,
                "cr": breakdown.cr, "aux": breakdown.aux,
                "total": breakdown.total, "lr": lr,
            })
            if fragments is not None and fragments:
                for row in record_telemetry(fragments):
                    _append_jsonl(telemetry_path, {
                        "step": step, "layer": row["layer"],
                        "loads": row["loads"], "confidences": row["confidences"],
                    })
            if step % config.val_interval == 0:
                last_val = (step, validate())
        epoch += 1

    if last_val is not None and last_val[0] == total:
        final_report = last_val[1]
    else:
        final_report = validate()
    save("final.ckpt")
    return {
        "run_dir": run_dir,
        "final_bleu": final_report["bleu"],
        "best_bleu": best_bleu,
        "steps": total,
    }


def _step_lr(training, step):
    from .training import learning_rate

    return learning_rate(training.learning_rate, training.warmup_steps, step)


def load_for_eval(ckpt_path):
    """Rebuild (model, config) from a checkpoint for inference commands."""
    snap = load_checkpoint(ckpt_path)
    config = snap["config"]
    model = build_model(config)
    restore_model(model, snap)
    return model, config


def read_telemetry(run_dir):
    path = os.path.join(run_dir, "telemetry.jsonl")
    if not os.path.exists(path):
        raise ValueError(f"no telemetry found under {run_dir!r}; was the run trained with telemetry on?")
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            rows.append(json.loads(line))
    if not rows:
        raise ValueError(f"telemetry file in {run_dir!r} is empty")
    return rows


def analyze_routing(run_dir, window=5, collapse_threshold=0.9, uniform_delta=0.05):
    """Aggregate a run's routing telemetry and flag pathologies.

    Returns a dict with the per-interval table rows, per-layer sustained
    max load and load spread over the final ``window`` intervals, a
    collapse flag (some expert holds more than ``collapse_threshold`` of
    the load across the whole window), and a random-routing flag (every
    confidence within ``uniform_delta`` of 1/N over the window).
    """
    rows = read_telemetry(run_dir)
    layers = sorted({r["layer"] for r in rows})
    by_layer = {k: [r for r in rows if r["layer"] == k] for k in layers}

    summary = {}
    collapsed = []
    random_sig = []
    for layer in layers:
        seq = by_layer[layer]
        tail = seq[-window:]
        max_loads = [max(r["loads"]) for r in tail]
        spreads = [max(r["loads"]) - min(r["loads"]) for r in tail]
        summary[layer] = {
            "intervals": len(seq),
            "final_loads": seq[-1]["loads"],
            "final_confidences": seq[-1]["confidences"],
            "sustained_max_load": min(max_loads),
            "final_spread": max(seq[-1]["loads"]) - min(seq[-1]["loads"]),
            "sustained_spread": sum(spreads) / len(spreads),
        }
        if len(tail) >= window and all(m > collapse_threshold for m in max_loads):
            collapsed.append(layer)
        n = len(seq[-1]["loads"])
        withins = []
        for r in tail:
            confs = r["confidences"]
            if confs is None or any(c is None for c in confs):
                withins.append(False)
            else:
                withins.append(all(abs(c - 1.0 / n) <= uniform_delta for c in confs))
        if len(tail) >= window and all(withins):
            random_sig.append(layer)

    return {
        "rows": rows,
        "layers": summary,
        "collapse_layers": collapsed,
        "collapse": bool(collapsed),
        "random_routing_layers": random_sig,
        "random_routing": bool(random_sig) and len(random_sig) == len(layers),
    }


def variance_report(ckpt_path, seeds, mode=None, split="test", token_budget=512):
    from .training import prediction_variance

    model, config = load_for_eval(ckpt_path)
    decode = config.decode if mode is None else dataclasses.replace(config.decode, mode=mode)
    data = generate_dataset(config.task)
    return prediction_variance(model, data[split], seeds, decode, token_budget=token_budget)


def sweep_alpha(base_config, alphas, log=None):
    """Train one run per alpha under a shared seed; returns (alpha, bleu) rows."""
    if not alphas:
        raise ValueError("alpha list must be non-empty")
    from .config import apply_overrides

    rows = []
    for alpha in alphas:
        cfg = apply_overrides(base_config, [f"training.alpha={alpha}"])
        cfg = apply_overrides(cfg, [f"run_dir={base_config.run_dir}-alpha{alpha:g}"])
        if log:
            log(f"alpha={alpha:g}: training into {cfg.resolved_run_dir()}")
        result = train_run(cfg, log=log)
        rows.append({"alpha": alpha, "bleu": result["final_bleu"], "run_dir": result["run_dir"]})
    return rows
