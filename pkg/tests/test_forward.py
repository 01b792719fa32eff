import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from logbranch.forward import (
    PopulationState,
    RateOverflow,
    SizeStop,
    Trajectory,
    band,
    beta_threshold,
    concentration_probe,
    rescale_frequency,
    simulate,
    stopping_time_T_beta,
    transition_rates,
)
from logbranch.measures import LawFamily, ModelParams, ReproductionLaw, moran_family, table_family
from logbranch.rng import replicate_rng


def fixed_family(law: dict, m) -> LawFamily:
    """Same law for both types at every K, with competition coefficient ``m``."""
    L = ReproductionLaw(law)
    return LawFamily("fixed", lambda K: L, lambda K: L, L, L, m, 0.0, 0.0, 0.0, 0.0)


DISPLACEMENTS = {(-1, 0), (0, -1), (-1, 1), (1, -1)}


def test_rate_table_example():
    params = ModelParams(10, moran_family(1))
    rows = transition_rates(PopulationState(5, 5), params)
    assert sum(r for r, _ in rows) == F(41, 2)
    assert all(isinstance(r, F) for r, _ in rows)
    assert transition_rates(PopulationState(0, 0), params) == []


def test_rate_table_pure_death():
    params = ModelParams(10, fixed_family({0: 1}, 1))
    rows = transition_rates(PopulationState(1, 0), params)
    assert len(rows) == 1
    rate, nxt = rows[0]
    assert rate == pytest.approx(1 + 1 / 10) and nxt == PopulationState(0, 0)


@given(st.integers(0, 40), st.integers(0, 40), st.fractions(0, 3, max_denominator=10),
       st.fractions(0, 3, max_denominator=10))
def test_rate_rows_are_displacements(a, b, th_p, th_m):
    fam = table_family({0: F(1, 3), 2: F(1, 2), 4: F(1, 6)}, {0: F(1, 3), 2: F(1, 2), 4: F(1, 6)}, {3: 1}, {})
    params = ModelParams(7, fam, th_p, th_m)
    for rate, nxt in transition_rates(PopulationState(a, b), params):
        assert rate > 0
        d = (nxt.n_plus - a, nxt.n_minus - b)
        ok = d in DISPLACEMENTS or (d[1] == 0 and d[0] >= 1) or (d[0] == 0 and d[1] >= 1)
        assert ok


def test_absorbing_start():
    traj = simulate(PopulationState(0, 0), ModelParams(10, moran_family(1)), 5.0, rng_seed=1)
    assert traj.status == "absorbed" and len(traj) == 1 and traj.final == PopulationState(0, 0)


def test_no_minus_without_mutation():
    traj = simulate(PopulationState(100, 0), ModelParams(100, moran_family(1)), 20.0, rng_seed=4)
    assert np.all(traj.n_minus == 0) and len(traj) > 100


def test_horizon_zero_single_row(tmp_path):
    traj = simulate(PopulationState(3, 2), ModelParams(10, moran_family(1)), 0.0, rng_seed=1)
    assert len(traj) == 1
    traj.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines() == ["t,n_plus,n_minus", "0.0,3,2"]


def test_determinism_bitwise():
    params = ModelParams(50, moran_family(1), 1.0, 0.5)
    a = simulate(PopulationState(30, 20), params, 30.0, rng_seed=replicate_rng(9, 3))
    b = simulate(PopulationState(30, 20), params, 30.0, rng_seed=replicate_rng(9, 3))
    assert np.array_equal(a.t, b.t) and np.array_equal(a.n_plus, b.n_plus) and np.array_equal(a.n_minus, b.n_minus)


def test_recorded_steps_follow_rate_table():
    fam = table_family({0: F(1, 4), 2: F(3, 4), 3: F(1, 4)}, {0: F(1, 4), 2: F(3, 4), 3: F(1, 4)}, {2: 1}, {})
    params = ModelParams(30, fam, 2, 1)
    traj = simulate(PopulationState(10, 10), params, 10.0, rng_seed=5)
    assert traj.check_steps(params)
    assert np.all(np.diff(traj.t) > 0)


def test_grid_sampling_is_cadlag():
    params = ModelParams(40, moran_family(1), 1.0, 1.0)
    full = simulate(PopulationState(20, 20), params, 15.0, rng_seed=replicate_rng(2))
    grid = np.linspace(0, 15, 31)
    sampled = simulate(PopulationState(20, 20), params, 15.0, rng_seed=replicate_rng(2), grid=grid)
    for k, t in enumerate(grid):
        assert full.state_at(t) == sampled.state(k)
    with pytest.raises(ValueError):
        sampled.state_at(1.0)


def test_extinction_absorbing():
    params = ModelParams(10, fixed_family({0: 1, 2: F(1, 2)}, 1))
    traj = simulate(PopulationState(3, 0), params, 100.0, rng_seed=3, grid=[1.0, 50.0, 100.0])
    assert traj.status == "absorbed"
    full = simulate(PopulationState(3, 0), params, 100.0, rng_seed=3)
    assert full.final == PopulationState(0, 0) and full.total[-1] == 0


def test_size_stop_and_callable_stop():
    params = ModelParams(100, moran_family(1))
    traj = simulate(PopulationState(10, 0), params, 1e3, SizeStop(0, 50), rng_seed=1)
    assert traj.status == "stopped" and traj.total[-1] == 50
    traj2 = simulate(PopulationState(10, 0), params, 1e3, lambda t, s: s.total >= 50, rng_seed=1)
    assert np.array_equal(traj.t, traj2.t) and np.array_equal(traj.n_plus, traj2.n_plus)


def test_rate_overflow():
    with pytest.raises(RateOverflow):
        simulate(PopulationState(1000, 0), ModelParams(10, moran_family(1)), 1.0, rng_seed=0, max_rate=100.0)


def test_critical_extinction_probability():
    # q(t) = P(extinct by t) from one individual solves q' = (1 - q)^2 / 2
    params = ModelParams(10**9, fixed_family({0: F(1, 2), 2: F(1, 2)}, 0))
    reps = 10_000
    dead = 0
    for r in range(reps):
        traj = simulate(PopulationState(1, 0), params, 50.0, rng_seed=replicate_rng(11, r), grid=[50.0])
        dead += traj.total[-1] == 0
    q = 1 - 1 / (1 + 50 / 2)
    se = math.sqrt(q * (1 - q) / reps)
    assert abs(dead / reps - q) <= 3 * se


def test_subcritical_mean():
    params = ModelParams(10**9, fixed_family({0: 2, 2: 1}, 0))
    n0, reps = 5, 100_000
    vals = np.empty(reps)
    for r in range(reps):
        traj = simulate(PopulationState(n0, 0), params, 1.0, rng_seed=replicate_rng(12, r), grid=[1.0])
        vals[r] = traj.total[-1]
    se = vals.std(ddof=1) / math.sqrt(reps)
    assert abs(vals.mean() - n0 / math.e) <= 3 * se


def test_waiting_times_are_exponential():
    params = ModelParams(2, fixed_family({0: F(1, 2), 2: 1}, 1))
    start = PopulationState(1, 1)
    rate = float(sum(r for r, _ in transition_rates(start, params)))
    waits = []
    for r in range(3000):
        traj = simulate(start, params, 100.0, rng_seed=replicate_rng(13, r))
        if len(traj) > 1:
            waits.append(traj.t[1])
    assert stats.kstest(waits, "expon", args=(0, 1 / rate)).pvalue > 0.01


def test_stopping_time_examples():
    t = np.array([0.0, 1.0, 2.0, 3.0])
    low = Trajectory(t, np.array([10, 20, 30, 40]), np.zeros(4, dtype=int))
    assert stopping_time_T_beta(low, 100, 0.5) is None
    full = Trajectory(t, np.array([100, 90, 95, 99]), np.zeros(4, dtype=int))
    assert stopping_time_T_beta(full, 100, 0.5) == 0.0
    rise = Trajectory(t, np.array([50, 89, 90, 99]), np.zeros(4, dtype=int))
    assert stopping_time_T_beta(rise, 100, 0.5) == 2.0
    assert beta_threshold(100, 0.5) == 90
    with pytest.raises(ValueError):
        stopping_time_T_beta(rise, 100, 1.5)


def test_rescale_examples(tmp_path):
    const = Trajectory(np.array([0.0, 5.0]), np.array([10, 10]), np.array([0, 0]))
    fp = rescale_frequency(const, 10)
    assert np.allclose(fp.x_plus, 1) and np.allclose(fp.x_minus, 0)
    one = Trajectory(np.array([0.0, 3.0]), np.array([90, 90]), np.array([30, 30]))
    fp = rescale_frequency(one, 10)
    assert fp.t[1] == pytest.approx(0.3)
    fp = rescale_frequency(one, 120)
    assert (fp.x_plus[0], fp.x_minus[0]) == (0.75, 0.25)
    assert fp.w[0] == 0.25
    fp.to_csv(tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().startswith("t,x_plus,x_minus\n")


def test_band():
    assert band(100, 0.1) == (90, 110)
    assert band(10, 1.0) == (0, 20)


def test_concentration_probe():
    assert concentration_probe(ModelParams(20, moran_family(1)), 1.0, 1.0, 20, 1) == 1.0
    assert concentration_probe(ModelParams(2000, moran_family(1)), 1.0, 0.15, 50, 2) >= 0.95
    small = concentration_probe(ModelParams(10, moran_family(1)), 1.0, 0.2, 300, 3)
    large = concentration_probe(ModelParams(1000, moran_family(1)), 1.0, 0.2, 100, 3)
    assert small <= large
