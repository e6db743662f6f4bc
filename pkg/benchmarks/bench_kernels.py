"""Compare the numba and numpy kernel backends on representative inputs.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is called once
to warm up (numba compiles on first use), then timed over repeated calls.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from adqsim.config import preset
from adqsim.env import reset
from adqsim.geometry import make_knot
from adqsim.kernels import implementations
from adqsim.physics import _solver_inputs


def cases(n_vertices):
    chain = make_knot("loose_overhand", n_vertices, 0.94, seed=0)
    pts = np.ascontiguousarray(chain.vertices)
    state, _ = reset(preset("nominal", n_vertices=n_vertices), 0)
    sim_chain = state.sim.chain
    inv, rest, prm = _solver_inputs(sim_chain, state.physics)
    x = np.array(sim_chain.vertices)
    v = np.array(state.sim.velocities)
    pin, pull = sim_chain.pin_index, sim_chain.pull_index
    target = x[pull] + np.array([0.004, 0.0, 0.002])
    cutoff = 2.0 * sim_chain.radius + 0.02
    return {
        "writhe": lambda k: k.writhe(pts),
        "close_pairs": lambda k: k.segment_distance_matrix_pairs(pts, cutoff, 2),
        "pbd_substep": lambda k: k.pbd_substep(x, v, inv, rest, pin, pull, target, prm),
    }


def run(n_vertices=48, repeat=5, number=20):
    impls = implementations()
    rows = []
    for name, fn in cases(n_vertices).items():
        times = {}
        for backend, mod in impls.items():
            fn(mod)
            times[backend] = min(timeit.repeat(lambda: fn(mod), repeat=repeat, number=number)) / number
        rows.append((name, times))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--vertices", type=int, default=48)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()
    rows = run(args.vertices, args.repeat, args.number)
    print(f"{'kernel':<14}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}")
    for name, t in rows:
        nb = t.get("numba")
        speed = f"{t['numpy'] / nb:9.1f}x" if nb else "      n/a"
        nbs = f"{nb * 1e3:12.3f}" if nb else f"{'n/a':>12}"
        print(f"{name:<14}{t['numpy'] * 1e3:12.3f}{nbs}{speed}")


if __name__ == "__main__":
    main()
