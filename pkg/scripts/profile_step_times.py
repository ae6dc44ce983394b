"""Time forward and backward simulation steps on a full-resolution mesh.

Prints a JSON report with per-step wall times; the budget is roughly one
second forward and four seconds backward per step on one CPU core.
"""

import argparse
import json
import time

import numpy as np

from drapefit.adjoint import backward_simulate
from drapefit.dynamics import Simulator
from drapefit.materials import default_material
from drapefit.meshing import (compute_rest_state, generate_disk_mesh,
                              pin_support_region)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--edge-length", type=float, default=0.0052)
    ap.add_argument("--h", type=float, default=0.05)
    ap.add_argument("--warmup", type=int, default=2)
    ap.add_argument("--steps", type=int, default=5)
    ap.add_argument("--out", default="")
    args = ap.parse_args()

    t0 = time.perf_counter()
    topology, positions = generate_disk_mesh(0.15, args.edge_length)
    rest = pin_support_region(
        compute_rest_state(topology, positions, 0.144), 0.09)
    build_s = time.perf_counter() - t0

    sim = Simulator(topology, rest, default_material(), args.h)
    state = sim.initial_state()
    for _ in range(args.warmup):   # first calls pay the jit compile
        state = sim.step(state)

    t0 = time.perf_counter()
    state, tape = sim.simulate(state, args.steps, record_tape=True)
    forward_s = (time.perf_counter() - t0) / args.steps

    gx = np.random.default_rng(0).normal(size=state.x.shape)
    backward_simulate(sim, tape, gx)   # backward jit warmup
    t0 = time.perf_counter()
    backward_simulate(sim, tape, gx)
    backward_s = (time.perf_counter() - t0) / args.steps

    report = {
        "vertices": topology.vertex_count,
        "faces": topology.face_count,
        "hinges": topology.hinge_count,
        "mesh_build_seconds": round(build_s, 3),
        "forward_step_seconds": round(forward_s, 4),
        "backward_step_seconds": round(backward_s, 4),
        "h": args.h,
        "timed_steps": args.steps,
    }
    text = json.dumps(report, indent=1)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
