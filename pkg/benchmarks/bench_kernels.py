"""Time the numba and numpy kernels on identical inputs.

Usage::

    python benchmarks/bench_kernels.py [--level 6] [--paths 20000] [--horizon 1.0] [--repeat 3]

For each kernel and backend it prints the best wall time over ``--repeat``
runs, nanoseconds per path-step, and whether the outputs agree (exactly
for the walk, to 1e-10 relative for the regulator pass).  The first numba
call of a process pays JIT compilation; it is run once untimed.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from fractal_control import _kernels
from fractal_control.diffusion import walk_model
from fractal_control.regulator import RegulatorConfig, competitor_suite, run_regulator, tabulate_theta_eta


def best_of(fn, repeat: int):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_walk(level: int, paths: int, steps: int, repeat: int) -> None:
    m = walk_model(level)
    snaps = np.arange(0, steps + 1, max(1, steps // 32))
    snaps[-1] = steps

    def run(which):
        return _kernels.walk_snapshots(m.nb4, m.root, m.qv, m.pool("uniform"), 0, 0, paths, snaps, which=which)

    run("numba")
    results = {}
    for which in ("numba", "numpy"):
        t, out = best_of(lambda: run(which), repeat)
        results[which] = out
        print(f"walk       {which:6s} {t:8.3f} s  {1e9 * t / (paths * steps):7.2f} ns/step")
    same = all(np.array_equal(a, b) for a, b in zip(results["numba"], results["numpy"]))
    print(f"walk       outputs identical: {same}")


def bench_regulator(level: int, paths: int, repeat: int) -> None:
    cfg = RegulatorConfig(a=1.0, level=level, paths=paths)
    table = tabulate_theta_eta(cfg)
    controls = competitor_suite()
    run_regulator(cfg, table, controls, which="numba")
    results = {}
    for which in ("numba", "numpy"):
        t, out = best_of(lambda: run_regulator(cfg, table, controls, which=which), repeat)
        results[which] = out
        per = 1e9 * t / (paths * cfg.steps * len(controls))
        print(f"regulator  {which:6s} {t:8.3f} s  {per:7.2f} ns/step/control")
    a, b = results["numba"], results["numpy"]
    close = all(np.allclose(getattr(a, f), getattr(b, f), rtol=1e-10, atol=1e-12)
                for f in ("W", "QV", "mart", "xbar", "x_final", "run_cost"))
    print(f"regulator  outputs agree: {close}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--level", type=int, default=6)
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--horizon", type=float, default=1.0)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    steps = int(round(args.horizon * 5 ** args.level))
    print(f"level {args.level}, {args.paths} paths, {steps} steps, backend default {_kernels.backend()}")
    bench_walk(args.level, args.paths, steps, args.repeat)
    bench_regulator(args.level, args.paths, args.repeat)


if __name__ == "__main__":
    main()
