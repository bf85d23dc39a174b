"""Time the numba and numpy kernel paths at training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 200] [--steps 50]

Each kernel is warmed up once (numba compiles on first call) and then timed
with ``timeit``; the table reports the best of five runs per call. With
``--steps`` > 0 it also times full training steps of the default model under
each backend, in a subprocess per backend so ``GRAPHMOE_NUMBA`` takes effect.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from graphmoe import _kernels as K

STEP_SCRIPT = """
import time
from graphmoe.config import load_config, resolve
from graphmoe.harness import train_run
cfg = resolve(load_config(None, ['train.steps={steps}', 'train.eval_every=100000', 'train.checkpoint=false', 'data.n_per_task=200']))
train_run(cfg, 0)  # warm-up, includes compilation
t = time.perf_counter()
train_run(cfg, 0)
print((time.perf_counter() - t) / {steps})
"""


def cases(rng):
    tokens, experts, k = 64, 8, 2
    probs = rng.dirichlet(np.ones(experts), tokens)
    idx = K.topk_rows_numpy(probs, k)
    rows = rng.integers(0, tokens, tokens * k)
    src = rng.normal(size=(tokens * k, 64))
    n_params = 600_000
    p, g = rng.normal(size=n_params), rng.normal(size=n_params)
    return {
        "topk_rows (64x8, K=2)": (lambda f: f(probs, k), K.topk_rows_numpy, getattr(K, "topk_rows_numba", None)),
        "argsort_desc_rows (64x8)": (lambda f: f(probs), K.argsort_desc_rows_numpy, getattr(K, "argsort_desc_rows_numba", None)),
        "expert_dispatch (64x2 -> 8)": (lambda f: f(idx, experts), K.expert_dispatch_numpy, getattr(K, "expert_dispatch_numba", None)),
        "scatter_add_rows (128x64)": (
            lambda f: f(np.zeros((tokens, 64)), rows, src),
            K.scatter_add_rows_numpy,
            getattr(K, "scatter_add_rows_numba", None),
        ),
        "adam_update (600k)": (
            lambda f: f(p.copy(), g, np.zeros(n_params), np.zeros(n_params), 1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8),
            K.adam_update_numpy,
            getattr(K, "adam_update_numba", None),
        ),
    }


def best_us(call, fn, repeat):
    call(fn)
    return min(timeit.repeat(lambda: call(fn), number=repeat, repeat=5)) / repeat * 1e6


def step_time(flag, steps):
    env = dict(os.environ, GRAPHMOE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(steps=steps)], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1]) * 1e6


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--steps", type=int, default=50, help="training steps per backend; 0 skips")
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, (call, np_fn, nb_fn) in cases(rng).items():
        t_np = best_us(call, np_fn, args.repeat)
        if nb_fn is None or not K.HAVE_NUMBA:
            print(f"{name:<30}{t_np:>12.2f}{'n/a':>12}{'':>10}")
            continue
        t_nb = best_us(call, nb_fn, args.repeat)
        print(f"{name:<30}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>9.2f}x")
    if args.steps > 0:
        t_np = step_time("0", args.steps)
        line = f"{'training step (default model)':<30}{t_np:>12.0f}"
        if K.HAVE_NUMBA:
            t_nb = step_time("1", args.steps)
            line += f"{t_nb:>12.0f}{t_np / t_nb:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
