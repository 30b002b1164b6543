#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Two sections: per-kernel microbenchmarks on training-sized arrays, and an
end-to-end training-step timing per backend (run in a subprocess so the
MOELAB_BACKEND selection happens at import).

Run from the repo root:

    python3 bench.py            # table on stdout
    python3 bench.py --json     # machine-readable
"""

import argparse
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from moelab.kernels import load_backend


def _time_call(fn, args, repeats):
    # one untimed call first so numba JIT compilation stays out of the numbers
    fn(*args)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def _cases(rng):
    rows, cols = 4096, 64
    x = rng.standard_normal((rows, cols))
    keep = (rng.random((rows, cols)) > 0.2).astype(np.float64)
    y = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    g = rng.standard_normal((rows, cols))
    xhat, inv_std = x.copy(), np.abs(rng.standard_normal(rows)) + 0.5
    n_params = 200_000
    p = rng.standard_normal(n_params)
    pg = rng.standard_normal(n_params)
    m = np.zeros(n_params)
    v = np.zeros(n_params)
    out = np.zeros((1024, cols))
    ids = rng.integers(0, 1024, size=rows)
    rows_g = rng.standard_normal((rows, cols))
    return [
        ("softmax2d", lambda b: (b.softmax2d, (x,))),
        ("masked_softmax2d", lambda b: (b.masked_softmax2d, (x, keep))),
        ("softmax_backward2d", lambda b: (b.softmax_backward2d, (y, g))),
        ("layernorm2d", lambda b: (b.layernorm2d, (x, 1e-5))),
        ("layernorm_backward2d", lambda b: (b.layernorm_backward2d, (xhat, inv_std, g))),
        ("adam_step", lambda b: (b.adam_step, (p.copy(), pg, m.copy(), v.copy(), 1e-3, 0.9, 0.98, 1e-9, 0.1, 0.02))),
        ("scatter_add_rows", lambda b: (b.scatter_add_rows, (out.copy(), ids, rows_g))),
    ]


def bench_kernels(repeats):
    backends = {}
    for name in ("numpy", "numba"):
        try:
            backends[name] = load_backend(name)
        except ImportError:
            print(f"backend {name!r} unavailable, skipping", file=sys.stderr)
    rng = np.random.default_rng(0)
    rows = []
    for kernel, make in _cases(rng):
        entry = {"kernel": kernel}
        for bname, mod in backends.items():
            fn, args = make(mod)
            entry[bname] = _time_call(fn, args, repeats)
        rows.append(entry)
    return rows


_STEP_SNIPPET = """
import json, time
from moelab.presets import get_preset
from moelab.runner import build_model
from moelab.tasks import generate_dataset, batch_iterator
from moelab.training import AdamOptimizer, run_training_step
from moelab.rng import Rng
from moelab import kernels

cfg = get_preset("thor-tiny-cipher")
model = build_model(cfg)
opt = AdamOptimizer(model.named_params(), beta1=cfg.training.beta1, beta2=cfg.training.beta2, eps=cfg.training.adam_eps)
data = generate_dataset(cfg.task)
batches = list(batch_iterator(data["train"], cfg.training.batch_token_budget, seed=1))
route = Rng(0, "route")
drop = Rng(0, "dropout")
for i in range(3):  # warm caches and JIT before timing
    run_training_step(model, batches[i % len(batches)], cfg.training, i, route, drop, opt)
t0 = time.perf_counter()
n = 20
for i in range(n):
    run_training_step(model, batches[i % len(batches)], cfg.training, 3 + i, route, drop, opt)
dt = (time.perf_counter() - t0) / n
print(json.dumps({"backend": kernels.BACKEND, "step_seconds": dt}))
"""


def bench_end_to_end():
    results = []
    for backend in ("numpy", "numba"):
        env = dict(os.environ, MOELAB_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, "-c", _STEP_SNIPPET], env=env, capture_output=True, text=True
        )
        if proc.returncode != 0:
            print(f"end-to-end bench failed for {backend}: {proc.stderr.strip()}", file=sys.stderr)
            continue
        results.append(json.loads(proc.stdout.strip().splitlines()[-1]))
    return results


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=30, help="timed repeats per kernel")
    parser.add_argument("--skip-end-to-end", action="store_true")
    parser.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    args = parser.parse_args()

    kernels_rows = bench_kernels(args.repeats)
    steps = [] if args.skip_end_to_end else bench_end_to_end()

    if args.json:
        print(json.dumps({"kernels": kernels_rows, "training_step": steps}, indent=2))
        return

    print(f"{'kernel':<24}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for row in kernels_rows:
        np_t = row.get("numpy")
        nb_t = row.get("numba")
        ratio = f"{np_t / nb_t:9.2f}x" if np_t and nb_t else "       n/a"
        np_s = f"{np_t * 1e6:10.1f}us" if np_t else "       n/a"
        nb_s = f"{nb_t * 1e6:10.1f}us" if nb_t else "       n/a"
        print(f"{row['kernel']:<24}{np_s}{nb_s}{ratio}")
    for entry in steps:
        print(f"training step [{entry['backend']}]: {entry['step_seconds'] * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
