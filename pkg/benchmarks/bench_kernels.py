"""Benchmark the hot kernels under the JIT and pure-numpy paths.

Runs the same workload twice: once in-process (honoring the current
``GRIDTOPO_NO_JIT`` setting) and once in a subprocess with the flag flipped,
then prints a side-by-side table.  Usage::

    python benchmarks/bench_kernels.py            # compare both paths
    python benchmarks/bench_kernels.py --inner    # one path, machine output
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def run_workload():
    from gridtopo import enumerate_catalog, load_ieee14
    from gridtopo.engine import EpisodeConfig, EpisodeEngine
    from gridtopo.kernels import USING_JIT
    from gridtopo.scenarios import generate_scenario

    spec = load_ieee14()
    catalog = enumerate_catalog(spec)
    engine = EpisodeEngine(spec, catalog, EpisodeConfig())
    engine.reset(generate_scenario(spec, 0, seed=3, steps=4096))
    all_actions = np.arange(len(catalog))

    # warm-up (includes JIT compilation when enabled)
    engine.simulate_action_scores(all_actions)
    for _ in range(10):
        engine.step(0)

    results = {"jit": USING_JIT}
    n = 3000 if USING_JIT else 300
    t0 = time.perf_counter()
    for _ in range(n):
        engine.step(0)
    results["engine_step_us"] = (time.perf_counter() - t0) / n * 1e6

    n = 300 if USING_JIT else 10
    t0 = time.perf_counter()
    for _ in range(n):
        engine.simulate_action_scores(all_actions)
    results["greedy_scan_ms"] = (time.perf_counter() - t0) / n * 1e3

    from gridtopo import kernels
    arr = spec.arrays
    state = engine.state
    n = 5000 if USING_JIT else 300
    t0 = time.perf_counter()
    for _ in range(n):
        kernels.grid_status(state.busbar, state.line_on, engine._gen_p,
                            engine._load_p, arr.n_sub, arr.gen_sub,
                            arr.load_sub, arr.line_from, arr.line_to,
                            arr.line_b)
    results["dc_solve_us"] = (time.perf_counter() - t0) / n * 1e6
    return results


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--inner", action="store_true")
    args = parser.parse_args()
    if args.inner:
        print(json.dumps(run_workload()))
        return

    here = run_workload()
    env = dict(os.environ)
    env["GRIDTOPO_NO_JIT"] = "" if os.environ.get("GRIDTOPO_NO_JIT") else "1"
    other = json.loads(subprocess.check_output(
        [sys.executable, __file__, "--inner"], env=env).decode().strip())
    jit, plain = (here, other) if here["jit"] else (other, here)

    rows = [("full DC solve", "dc_solve_us", "us"),
            ("engine step (do-nothing)", "engine_step_us", "us"),
            ("greedy scan, 106 actions", "greedy_scan_ms", "ms")]
    print(f"{'kernel':<28} {'numba njit':>12} {'pure numpy':>12} {'speedup':>9}")
    for label, key, unit in rows:
        speed = plain[key] / jit[key]
        print(f"{label:<28} {jit[key]:>9.1f} {unit:>2} {plain[key]:>9.1f} "
              f"{unit:>2} {speed:>8.1f}x")


if __name__ == "__main__":
    main()
