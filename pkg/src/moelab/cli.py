"""Command-line entry point.

Verbs:

  train            train a preset or config file into a run directory
  eval             score a checkpoint on a data split
  analyze-routing  tabulate a run's routing telemetry and flag pathologies
  variance         prediction variance across stochastic inference seeds
  sweep-alpha      train one run per consistency weight, report BLEU
  list-presets     enumerate the named experiment presets
  gen-data         write a synthetic dataset as parallel text files

Flags mirror config field paths via --set section.field=value. The only
environment variable is MOELAB_RUN_ROOT, which reroots relative run_dir
paths.
"""

import argparse
import dataclasses
import json
import os
import sys

from .config import RunConfig, apply_overrides
from .inference import evaluate
from .presets import get_preset, preset_names
from .tasks import SyntheticTaskSpec, generate_dataset


def _load_run_config(args):
    if args.preset and args.config:
        raise ValueError("give either --preset or --config, not both")
    if args.preset:
        cfg = get_preset(args.preset)
    elif args.config:
        cfg = RunConfig.load(args.config)
    else:
        raise ValueError("a run needs --preset or --config")
    overrides = list(args.set or [])
    if getattr(args, "run_dir", None):
        overrides.append(f"run_dir={args.run_dir}")
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def _add_config_args(p):
    p.add_argument("--preset", help="preset name (see list-presets)")
    p.add_argument("--config", help="path to a config.json")
    p.add_argument("--set", action="append", metavar="PATH=VALUE",
                   help="override a config field, e.g. training.seed=3")
    p.add_argument("--run-dir", help="override the run directory")


def cmd_train(args):
    from .runner import train_run

    cfg = _load_run_config(args)
    log = None if args.quiet else (lambda msg: print(msg))
    result = train_run(cfg, resume=args.resume, log=log)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_eval(args):
    from .runner import load_for_eval

    model, cfg = load_for_eval(args.checkpoint)
    data = generate_dataset(cfg.task)
    pairs = data[args.split]
    if args.self_test:
        from .bleu import bleu

        refs = [list(t) for _, t in pairs]
        print(json.dumps({"bleu": bleu(refs, refs), "exact_match": 1.0, "self_test": True}))
        return 0
    decode = cfg.decode
    for field, value in [("mode", args.mode), ("beam_size", args.beam_size),
                         ("length_penalty", args.length_penalty), ("seed", args.seed)]:
        if value is not None:
            decode = dataclasses.replace(decode, **{field: value})
    report = evaluate(model, pairs, decode, token_budget=args.token_budget)
    out = {k: report[k] for k in ("bleu", "exact_match", "flops_total", "flops_experts")}
    out["mode"] = decode.mode
    out["split"] = args.split
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_analyze_routing(args):
    from .runner import analyze_routing

    run_dir = args.run_dir
    root = os.environ.get("MOELAB_RUN_ROOT")
    if root and not os.path.isabs(run_dir) and not os.path.exists(run_dir):
        run_dir = os.path.join(root, run_dir)
    report = analyze_routing(run_dir, window=args.window,
                             collapse_threshold=args.collapse_threshold,
                             uniform_delta=args.uniform_delta)

    n = len(next(iter(report["layers"].values()))["final_loads"])
    load_cols = " ".join(f"{'load' + str(i):>8}" for i in range(n))
    conf_cols = " ".join(f"{'conf' + str(i):>8}" for i in range(n))
    print(f"{'step':>6} {'layer':<8} {load_cols} {conf_cols}")
    for row in report["rows"]:
        loads = " ".join(f"{v:8.4f}" for v in row["loads"])
        confs = row["confidences"]
        if confs is None:
            conf_txt = " ".join(f"{'-':>8}" for _ in range(n))
        else:
            conf_txt = " ".join(f"{'-':>8}" if c is None else f"{c:8.4f}" for c in confs)
        print(f"{row['step']:>6} {row['layer']:<8} {loads} {conf_txt}")

    print()
    for layer, s in sorted(report["layers"].items()):
        print(f"{layer}: sustained max load {s['sustained_max_load']:.4f}, "
              f"final spread {s['final_spread']:.4f}, "
              f"sustained spread {s['sustained_spread']:.4f}")
    print(f"collapse: {'yes (' + ', '.join(report['collapse_layers']) + ')' if report['collapse'] else 'no'}")
    print(f"random-routing signature: {'yes' if report['random_routing'] else 'no'}")
    return 0


def cmd_variance(args):
    from .runner import variance_report

    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        seeds = list(range(args.runs))
    report = variance_report(args.checkpoint, seeds, mode=args.mode,
                             split=args.split, token_budget=args.token_budget)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_sweep_alpha(args):
    from .runner import sweep_alpha

    cfg = _load_run_config(args)
    alphas = [float(a) for a in args.alphas.split(",")]
    log = None if args.quiet else (lambda msg: print(msg))
    rows = sweep_alpha(cfg, alphas, log=log)
    print(f"{'alpha':>8} {'bleu':>8}")
    for row in rows:
        print(f"{row['alpha']:8.2f} {row['bleu']:8.2f}")
    return 0


def cmd_list_presets(args):
    for name in preset_names():
        cfg = get_preset(name)
        print(f"{name:<26} {cfg.routing.mode:<16} N={cfg.routing.n_experts} "
              f"{cfg.training.objective:<20} {cfg.task.kind} steps={cfg.training.total_steps}")
    return 0


def cmd_gen_data(args):
    spec = SyntheticTaskSpec(
        kind=args.task, vocab_size=args.vocab_size, min_len=args.min_len,
        max_len=args.max_len, train_size=args.train_size, valid_size=args.valid_size,
        test_size=args.test_size, seed=args.seed, reorder_window=args.reorder_window,
    )
    data = generate_dataset(spec)
    os.makedirs(args.out, exist_ok=True)
    for split, pairs in data.items():
        for side, idx in (("src", 0), ("tgt", 1)):
            path = os.path.join(args.out, f"{split}.{side}")
            with open(path, "w", encoding="utf-8") as f:
                for pair in pairs:
                    f.write(" ".join(str(t) for t in pair[idx]))
                    f.write("\n")
    counts = {split: len(pairs) for split, pairs in data.items()}
    print(json.dumps({"out": args.out, "task": args.task, "sizes": counts}, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="desk-scale lab for stochastic-expert and gated MoE transformers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a preset or config into a run directory")
    _add_config_args(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--mode", choices=("dispatch_sentence", "dispatch_token", "ensemble"))
    p.add_argument("--beam-size", type=int)
    p.add_argument("--length-penalty", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--token-budget", type=int, default=512)
    p.add_argument("--self-test", action="store_true",
                   help="score the references against themselves (must give BLEU 100)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze-routing", help="tabulate routing telemetry")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--collapse-threshold", type=float, default=0.9)
    p.add_argument("--uniform-delta", type=float, default=0.05)
    p.set_defaults(fn=cmd_analyze_routing)

    p = sub.add_parser("variance", help="prediction variance across inference seeds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--seeds", help="comma-separated seed list; overrides --runs")
    p.add_argument("--mode", choices=("dispatch_sentence", "dispatch_token", "ensemble"))
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--token-budget", type=int, default=512)
    p.set_defaults(fn=cmd_variance)

    p = sub.add_parser("sweep-alpha", help="train one run per consistency weight")
    _add_config_args(p)
    p.add_argument("--alphas", default="0,2,4,6,8", help="comma-separated alpha values")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_sweep_alpha)

    p = sub.add_parser("list-presets", help="enumerate the named presets")
    p.set_defaults(fn=cmd_list_presets)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as text files")
    p.add_argument("--task", default="cipher_translation",
                   choices=("copy", "reverse", "cipher_translation"))
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--train-size", type=int, default=600)
    p.add_argument("--valid-size", type=int, default=200)
    p.add_argument("--test-size", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reorder-window", type=int, default=1)
    p.set_defaults(fn=cmd_gen_data)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
