"""Compare the compiled kernels with the pure-Python fallback.

Each workload runs through the public API with the kernel functions swapped
for one backend at a time, checks that both backends return identical
results and reports wall time and speedup.

    python benchmarks/bench_kernels.py [--repeat 3] [--scale 1.0]
"""

from __future__ import annotations

import argparse
import contextlib
import time

import numpy as np

from logbranch import asg, diffusion, genealogy, kernels
from logbranch.forward import PopulationState, simulate
from logbranch.measures import ModelParams, moran_family
from logbranch.rng import replicate_rng

KERNELS = ("ctmc_run", "sde_run", "dual_run", "graphical_run", "asg_backward", "branching_classes")


@contextlib.contextmanager
def use_backend(name: str):
    mod = kernels.backend(name)
    saved = {k: getattr(kernels, k) for k in KERNELS}
    try:
        for k in KERNELS:
            setattr(kernels, k, getattr(mod, k))
        yield
    finally:
        for k, v in saved.items():
            setattr(kernels, k, v)


def ctmc(scale):
    params = ModelParams(500, moran_family(1))
    traj = simulate(PopulationState(250, 250), params, 200.0 * scale, None, replicate_rng(1))
    return traj.n_plus[-1], traj.n_minus[-1], len(traj.t)


def sde(scale):
    p = diffusion.DiffusionParams.moran(1.0, 0.5)
    return tuple(diffusion.sde_values(0.4, p, [1.0 * scale], 1e-6, replicate_rng(2)))


def dual(scale):
    p = diffusion.DiffusionParams.moran(1.0, 0.5)
    return sum(int(diffusion.dual_values(3, p, [1.0], replicate_rng(3, r))[0]) for r in range(int(2000 * scale)))


def graphical(scale):
    params = ModelParams(300, moran_family(1))
    log, _ = asg.simulate_graphical(params, T=1.0 * scale, initial=PopulationState(150, 150),
                                    rng_seed=replicate_rng(4))
    path = asg.lineage_counting(log, 5, replicate_rng(5))
    return len(log), log.final_size, path.final


def branching(scale):
    params = ModelParams(100, moran_family(1))
    pop = genealogy.LabeledPopulation(frozenset({(1,)}), frozenset({(2,)}))
    est = genealogy.asymptotic_fraction_estimate(params, (1,), pop, int(200_000 * scale), replicate_rng(6))
    return est.value, est.size


WORKLOADS = {
    "ctmc (K=500, 200 time units)": ctmc,
    "sde (1e6 Euler steps)": sde,
    "dual (2000 paths)": dual,
    "graphical + backward (K=300)": graphical,
    "free branching (to 2e5)": branching,
}


def timed(fn, scale, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(scale)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--scale", type=float, default=1.0, help="multiply every workload size")
    args = ap.parse_args(argv)
    try:
        kernels.backend("cython")
    except ImportError:
        print("compiled extension not built; install with pip install -e . --no-build-isolation")
        return 1
    print(f"{'workload':32s} {'cython s':>10s} {'python s':>10s} {'speedup':>8s}  same")
    for name, fn in WORKLOADS.items():
        with use_backend("cython"):
            tc, oc = timed(fn, args.scale, args.repeat)
        with use_backend("python"):
            tp, op = timed(fn, args.scale, max(1, args.repeat // 3))
        print(f"{name:32s} {tc:10.4f} {tp:10.4f} {tp / tc:8.1f}  {oc == op}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
