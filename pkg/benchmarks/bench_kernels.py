"""Time the numba kernels against their numpy twins on study-sized inputs.

    python benchmarks/bench_kernels.py [--repeats 5]

Prints one line per kernel: mean seconds per call for each backend and the
speed-up. Compilation happens in a warm-up call that is not timed.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from goalrank import kernels as K


def _time(fn, args, repeats):
    fn(*args)  # warm-up (numba compiles here)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def cases(rng):
    # dense scorer pass: 50 users x 65 prefix states x 8 candidates, width 240
    U, P, N, W = 50, 65, 8, 240
    a, b, c = rng.normal(size=(U, W)), rng.normal(size=(U, N, W)), rng.normal(size=(U, P, W))
    v, g = rng.normal(size=W), rng.normal(size=(U, P, N))
    yield "fused_hidden_forward", K.fused_hidden_forward_numba, K.fused_hidden_forward_numpy, (a, b, c, v, 0)
    yield "fused_hidden_backward", K.fused_hidden_backward_numba, K.fused_hidden_backward_numpy, (a, b, c, v, 0, g)

    # ALS row solves: 200 rows with 120 observed columns each, rank 9
    rows, per, d = 200, 120, 9
    indptr = np.arange(0, rows * per + 1, per, dtype=np.int64)
    cols = rng.integers(0, 60, size=rows * per).astype(np.int64)
    targets = rng.random(rows * per)
    other = rng.normal(size=(60, d))
    yield "als_solve_rows", K.als_solve_rows_numba, K.als_solve_rows_numpy, (indptr, cols, targets, other, 0.1)

    # reward of every list for 200 users on 336 lists
    users = np.repeat(np.arange(200), 336).astype(np.int64)
    lists = rng.integers(0, 60, size=(len(users), 3)).astype(np.int64)
    util, pw = rng.normal(size=(200, 60)), np.array([1.0, 0.8, 0.6])
    inter = rng.normal(size=(60, 60))
    inter = (inter + inter.T) / 2
    yield "list_reward", K.list_reward_numba, K.list_reward_numpy, (util, users, lists, pw, inter)
    yield "keyed_normal", K.keyed_normal_numba, K.keyed_normal_numpy, (7, users, lists)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numba_s':>10s} {'numpy_s':>10s} {'speedup':>8s}")
    for name, fast, slow, fargs in cases(rng):
        tf, ts = _time(fast, fargs, args.repeats), _time(slow, fargs, args.repeats)
        print(f"{name:24s} {tf:10.5f} {ts:10.5f} {ts / tf:8.1f}x")


if __name__ == "__main__":
    main()
