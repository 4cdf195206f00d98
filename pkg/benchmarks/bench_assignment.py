"""Compiled vs pure-Python assignment kernels on OM-sized problems.

Usage: python3 benchmarks/bench_assignment.py [--instances N] [--seed S]
Prints one JSON line per (shape, backend) with per-solve timings.
"""
import argparse
import json
import time

import numpy as np

from prvr import matching

SHAPES = [(2, 8), (4, 8), (4, 32), (8, 32), (32, 32)]


def bench(shape, backend, problems):
    times = []
    for pi in problems:
        t0 = time.perf_counter()
        matching.solve_max_assignment(pi, backend=backend)
        times.append(time.perf_counter() - t0)
    t = np.array(times) * 1e6
    return {"rows": shape[0], "cols": shape[1], "backend": backend, "n": len(problems),
            "p50_us": float(np.percentile(t, 50)), "mean_us": float(t.mean())}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--instances", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    backends = ["python"] + (["compiled"] if matching.BACKEND == "compiled" else [])
    rng = np.random.default_rng(args.seed)
    rows = []
    for shape in SHAPES:
        problems = [rng.uniform(-1, 1, size=shape) for _ in range(args.instances)]
        plans = {b: [matching.solve_max_assignment(pi, backend=b).total_profit for pi in problems] for b in backends}
        if len(backends) == 2 and plans["python"] != plans["compiled"]:
            raise SystemExit(f"backends disagree on {shape}")
        for b in backends:
            rows.append(bench(shape, b, problems))
            print(json.dumps(rows[-1]), flush=True)
    if len(backends) == 2:
        for shape in SHAPES:
            py, c = (next(r for r in rows if (r["rows"], r["cols"]) == shape and r["backend"] == b)
                     for b in ("python", "compiled"))
            print(json.dumps({"rows": shape[0], "cols": shape[1], "speedup": py["mean_us"] / c["mean_us"]}))
    return rows


if __name__ == "__main__":
    main()
