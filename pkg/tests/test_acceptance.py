"""Full-size acceptance criteria.

Each test records one pass/fail line, collected in the ``acceptance
criteria`` section of the pytest summary.  Deselect with ``-m "not
acceptance"`` for a quick run.
"""

import json
import math
from fractions import Fraction as F

import numpy as np
import pytest

from logbranch.asg import (
    brute_force_distribution,
    closed_form_events,
    p_hat_minus,
    p_hat_plus,
    p_minus,
    p_plus,
    transition_distribution,
)
from logbranch.cli import main
from logbranch.diffusion import DiffusionParams, PlanePoint, gamma_projection, generator_duality_residual, katzenberger_flow
from logbranch.harness import ExperimentSpec, run
from logbranch.measures import (
    LawFamily,
    ModelParams,
    ReproductionLaw,
    build_coupling,
    check_orderings,
    equalize_mass,
    moran_family,
)

pytestmark = pytest.mark.acceptance

JOBS = 1


def test_criterion_01_exact_combinatorics(criterion):
    bad = checked = 0
    for N in range(13):
        for n in range(N + 1):
            for j in range(N // 2 + 1):
                for i in range(N - 2 * j + 1):
                    checked += 1
                    d = transition_distribution(i, j, n, N)
                    bf = brute_force_distribution(i, j, n, N)
                    same = {k: v for k, v in d.probs.items() if v} == {k: v for k, v in bf.probs.items() if v}
                    ev = closed_form_events(i, j, n, N)
                    closed = (p_plus(i, j, n, N) == ev["p_plus"] and p_hat_plus(i, j, n, N) == ev["p_hat_plus"]
                              and p_minus(i, j, n, N) == ev["p_minus"]
                              and p_hat_minus(i, j, n, N) == ev["p_hat_minus"])
                    bad += not (same and closed and d.total() == 1)
    assert criterion(1, bad == 0, f"{checked} instances, {bad} mismatches")


def random_ordered_pair(rng):
    """Minus law on {0..6}; the plus law moves mass upward and away from 0."""
    while True:
        support = sorted(rng.choice(7, size=rng.integers(1, 5), replace=False).tolist())
        minus = {int(k): F(int(rng.integers(1, 20)), 10) for k in support}
        plus = dict(minus)
        for _ in range(int(rng.integers(0, 4))):
            src = int(rng.choice(sorted(plus)))
            moved = plus[src] * F(int(rng.integers(0, 11)), 10)
            plus[src] -= moved
            dst = src + int(rng.integers(1, 4))
            plus[dst] = plus.get(dst, 0) + moved
        if rng.random() < 0.5:
            dst = int(rng.integers(1, 7))
            plus[dst] = plus.get(dst, 0) + F(int(rng.integers(1, 11)), 10)
        minus = ReproductionLaw({k: v for k, v in minus.items() if v > 0})
        plus = ReproductionLaw({k: v for k, v in plus.items() if v > 0})
        if check_orderings(minus, plus).ok and plus.restrict_positive().masses:
            return minus, plus


def coupling_ok(minus, plus):
    fam = LawFamily("pair", lambda K: plus, lambda K: minus, plus, minus, 1.0, 0.0, 0.0, 0.0, 0.0)
    nu = build_coupling(ModelParams(7, fam))
    eq_minus, eq_plus = equalize_mass(minus.restrict_positive(), plus.restrict_positive())
    return (nu.exact and nu.marginal_minus() == eq_minus.masses and nu.marginal_plus() == eq_plus.masses
            and nu[(0, 0)] == plus[0] and nu[(0, 1)] == minus[0] - plus[0])


def test_criterion_02_coupling_marginals(criterion):
    rng = np.random.default_rng(2)
    cases = [(ModelParams(K, moran_family(1)).minus_law, ModelParams(K, moran_family(1)).plus_law)
             for K in (1, 10, 1000)]
    cases += [random_ordered_pair(rng) for _ in range(20)]
    fails = sum(not coupling_ok(m, p) for m, p in cases)
    assert criterion(2, fails == 0, f"{len(cases)} law pairs (3 Moran, 20 random), {fails} failures")


def test_criterion_03_generator_duality(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        m = rng.uniform(0.1, 3)
        v_minus = rng.uniform(0.1, 3)
        v_plus = v_minus + rng.uniform(0, m + v_minus)
        s_minus = rng.uniform(-2, 2)
        s_plus = s_minus + (v_plus - v_minus) + rng.uniform(0, 3)
        p = DiffusionParams(m, s_plus, s_minus, v_plus, v_minus, rng.uniform(0, 3))
        worst = max(worst, abs(generator_duality_residual(rng.uniform(0, 1), int(rng.integers(0, 11)), p)))
    assert criterion(3, worst <= 1e-10, f"max residual {worst:.2e} over 200 draws (tol 1e-10)")


def test_criterion_04_monte_carlo_duality(criterion):
    spec = ExperimentSpec("duality", {"w0": [0.2, 0.5, 0.8], "n0": [1, 2, 3], "t": [0.5, 1.0]},
                          replicates=100_000, seed=4, theta_plus=0.5)
    rep = run(spec, JOBS)
    zmax = rep.summary["max_abs_z"]
    assert criterion(4, len(rep.cells) == 18 and zmax <= 4,
                     f"18 cells, 1e5 replicates per side, max |z| = {zmax:.2f} (tol 4)")


def test_criterion_05_generator_limits(criterion):
    rep = run(ExperimentSpec("limits_probe", {"K": [10_000], "n": [1, 2, 3, 4, 5]}, replicates=1))
    plus = max(c["plus_rel_err"] for c in rep.cells)
    minus = max(c["minus_rel_err"] for c in rep.cells if c["minus_rel_err"] is not None)
    bar = max(c["bar_sum"] for c in rep.cells)
    ok = plus <= 0.02 and minus <= 0.02 and bar <= 0.05
    assert criterion(5, ok, f"K=1e4, n<=5: plus rel err {plus:.1e}, minus rel err {minus:.1e}, bar sum {bar:.1e}")


def test_criterion_06_asg_rates(criterion):
    spec = ExperimentSpec("asg_rates", {"K": [500, 5000], "m": 5, "T": 1.0,
                                        "replicates_by_K": {"500": 2000, "5000": 200},
                                        "dual_replicates": 10_000}, replicates=200, seed=6)
    rep = run(spec, JOBS)
    last = rep.cells[-1]
    s = rep.summary
    ok = (s["max_rel_err_last_K"] <= 0.15 and s["toward_limit"] and s["cemetery_strictly_decreasing"])
    cells = "; ".join(
        f"K={c['K']}: branch {c['branch_rate']:.3f}, coal {c['coalescence_rate']:.3f}, "
        f"cemetery {c['cemetery_freq']:.4f}, chi2 p {c['chi2_p']:.3f}" for c in rep.cells)
    assert criterion(6, ok, f"{cells}; max rel err at K=5000 {s['max_rel_err_last_K']:.3f} (tol 0.15)")
    assert last["in_band"] > 0


def test_criterion_07_frequency_convergence(criterion):
    spec = ExperimentSpec("frequency_convergence", {"K": [2000], "t": [0.5, 1.0], "moments": [1, 2]},
                          replicates=10_000, seed=7, theta_plus=0.5)
    rep = run(spec, JOBS)
    zmax = rep.summary["max_abs_z"]
    assert criterion(7, zmax <= 4, f"K=2000, 1e4 replicates per side, 4 cells, max |z| = {zmax:.2f} (tol 4)")


def test_criterion_08_growth_phase(criterion):
    spec = ExperimentSpec("growth", {"K": [50, 500, 2000], "beta": 0.5, "u": [[1]]}, replicates=500, seed=8)
    rep = run(spec, JOBS)
    means = [c["mean_abs_diff"] for c in rep.cells]
    ns = [c["n"] for c in rep.cells]
    ok = bool(rep.summary["strictly_decreasing"]) and min(ns) >= 100
    assert criterion(8, ok, "means " + ", ".join(f"K={c['K']}: {c['mean_abs_diff']:.4f} (n={c['n']})"
                                                 for c in rep.cells))
    assert len(means) == 3


def test_criterion_09_flow(criterion):
    rng = np.random.default_rng(9)
    inv = conv = 0.0
    for _ in range(100):
        angle = rng.uniform(0, math.pi / 2)
        a, b = math.cos(angle) ** 2, math.sin(angle) ** 2
        r = rng.uniform(0.5, 2)
        x = PlanePoint(r * a, r * b)
        m = rng.uniform(0.5, 2)
        px = gamma_projection(x)
        for t in rng.uniform(0, 10, size=3):
            y = gamma_projection(katzenberger_flow(x, float(t), m))
            inv = max(inv, abs(y.x_plus - px.x_plus), abs(y.x_minus - px.x_minus))
        z = katzenberger_flow(x, 20 / m, m)
        conv = max(conv, abs(z.x_plus - px.x_plus), abs(z.x_minus - px.x_minus))
    ok = inv <= 1e-8 and conv <= 1e-6
    assert criterion(9, ok, f"projection drift {inv:.1e} (tol 1e-8), distance at 20/m {conv:.1e} (tol 1e-6)")


def test_criterion_10_decay_probe(criterion):
    spec = ExperimentSpec("decay_probe", {"K": [10_000], "beta": 0.5, "n0": 10}, replicates=1000, seed=10)
    rep = run(spec, JOBS)
    slope = rep.summary["slope"]
    ok = slope is not None and slope <= -1.5
    assert criterion(10, ok, f"K=1e4, n0=10, 1000 replicates, fitted slope {slope:.3f} (tol <= -1.5)")


SMALL_EXPERIMENTS = {
    "growth": {"grid": {"K": [30, 60], "stop_size": 500}, "replicates": 12},
    "frequency_convergence": {"grid": {"K": [100], "t": [0.2], "dt": 1e-3}, "replicates": 40, "theta_plus": 0.5},
    "duality": {"grid": {"w0": [0.4], "n0": [1, 2], "t": [0.2], "dt": 1e-3}, "replicates": 40, "theta_plus": 0.5},
    "asg_rates": {"grid": {"K": [200, 300], "m": 3, "T": 0.3, "L": 4, "dual_replicates": 200}, "replicates": 8},
    "decay_probe": {"grid": {"K": [500], "n0": 5, "points": 4}, "replicates": 30},
    "limits_probe": {"grid": {"K": [100, 1000], "n": [1, 2]}, "replicates": 1},
}


def test_criterion_11_determinism(criterion, tmp_path):
    differing = []
    for kind, doc in SMALL_EXPERIMENTS.items():
        exp = tmp_path / f"{kind}.json"
        exp.write_text(json.dumps({"kind": kind, "seed": 11, **doc}))
        outs = []
        for jobs in ("1", "2", "1"):
            out = tmp_path / f"{kind}-{len(outs)}"
            assert main(["run", "--experiment", str(exp), "--jobs", jobs, "--out", str(out)]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        if not (outs[0] == outs[1] == outs[2] and len(outs[0]) == 2):
            differing.append(kind)
    ok = not differing
    assert criterion(11, ok, f"{len(SMALL_EXPERIMENTS)} experiment kinds, jobs 1/2/1 byte-identical"
                     + (f"; differing: {', '.join(differing)}" if differing else ""))
