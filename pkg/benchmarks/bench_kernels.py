"""Time the numba and numpy convolution kernels on desk-model shapes.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 16] [--solve]

Both backends are importable side by side, so the kernel table needs one
process.  ``--solve`` also times a whole forward solve of the desk model
with ``LDEQ_NUMBA=1`` and ``LDEQ_NUMBA=0`` in separate subprocesses, since
the flag is read at import.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from lipdeq import _kernels as K

# (name, Ci, Co, H, W, k, stride, pad): the conv shapes of the default model
SHAPES = [
    ("inj 3->4 @32", 3, 4, 32, 32, 3, 1, 1),
    ("res 4->4 @32", 4, 4, 32, 32, 3, 1, 1),
    ("res 8->8 @8", 8, 8, 8, 8, 3, 1, 1),
    ("down 4->8 @32 s2", 4, 8, 32, 32, 3, 2, 1),
    ("1x1 8->4 @8", 8, 4, 8, 8, 1, 1, 0),
]

SOLVE_SNIPPET = """
import time, numpy as np
from lipdeq._kernels import BACKEND
from lipdeq.model import ModelConfig, build_model
from lipdeq.equilibrium import solve_forward
from lipdeq.solvers import SolverConfig
p = build_model(ModelConfig(dtype="float32"))
x = np.random.default_rng(0).uniform(size=({batch}, 3, 32, 32))
solve_forward(p, x[:1], SolverConfig(), mode="eval")
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter()
    r = solve_forward(p, x, SolverConfig(tol=1e-6, max_iter=30), mode="eval")
    best = min(best, time.perf_counter() - t)
print(BACKEND, r.forward_report.nfes, best)
"""


def best_ms(fn, repeat):
    return 1e3 * min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(batch, repeat, dtype):
    rng = np.random.default_rng(0)
    rows = []
    for name, ci, co, h, w, k, s, p in SHAPES:
        x = rng.standard_normal((batch, ci, h, w)).astype(dtype)
        wt = rng.standard_normal((co, ci, k, k)).astype(dtype)
        y = K.conv2d_numpy(x, wt, s, p)
        g = rng.standard_normal(y.shape).astype(dtype)
        cases = {
            "fwd": (lambda: K.conv2d_numba(x, wt, s, p), lambda: K.conv2d_numpy(x, wt, s, p)),
            "dx": (lambda: K.conv2d_input_grad_numba(g, wt, x.shape, s, p),
                   lambda: K.conv2d_input_grad_numpy(g, wt, x.shape, s, p)),
            "dw": (lambda: K.conv2d_weight_grad_numba(x, g, wt.shape[2:], s, p),
                   lambda: K.conv2d_weight_grad_numpy(x, g, wt.shape[2:], s, p)),
        }
        for kind, (fnb, fnp) in cases.items():
            a, b = fnb(), fnp()  # also warms the JIT
            err = float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))
            rows.append((name, kind, best_ms(fnb, repeat), best_ms(fnp, repeat), err))
    return rows


def bench_solve(batch, repeat):
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, LDEQ_NUMBA=flag)
        proc = subprocess.run([sys.executable, "-c", SOLVE_SNIPPET.format(batch=batch, repeat=repeat)], env=env,
                              capture_output=True, text=True, check=True)
        backend, nfes, secs = proc.stdout.split()
        out[backend] = (int(nfes), float(secs))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    ap.add_argument("--solve", action="store_true", help="also time a full forward solve per backend")
    args = ap.parse_args(argv)
    if K.numba is None:
        print("numba is not importable; nothing to compare", file=sys.stderr)
        return 1

    print(f"batch {args.batch}, {args.dtype}, best of {args.repeat} (ms)")
    print(f"{'shape':<18} {'op':<4} {'numba':>9} {'numpy':>9} {'speedup':>8} {'max rel diff':>13}")
    for name, kind, tb, tn, err in bench_kernels(args.batch, args.repeat, args.dtype):
        print(f"{name:<18} {kind:<4} {tb:>9.3f} {tn:>9.3f} {tn / tb:>7.2f}x {err:>13.2e}")

    if args.solve:
        res = bench_solve(args.batch, max(1, args.repeat // 4))
        print()
        for backend, (nfes, secs) in res.items():
            print(f"forward solve [{backend}]: {nfes} NFEs, best {secs:.3f} s")
        if {"numba", "numpy"} <= res.keys():
            print(f"solve speedup {res['numpy'][1] / res['numba'][1]:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
