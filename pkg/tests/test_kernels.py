"""The compiled loops and the Python fallback must agree bit for bit."""

import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from logbranch import _fallback, kernels
from logbranch.measures import ModelParams, build_coupling, moran_family, poisson_family

cy = pytest.importorskip("logbranch._kernels")


def rng(seed):
    return np.random.Generator(np.random.SFC64(seed))


def same(a, b):
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(np.asarray(a), np.asarray(b))
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(same(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, float) and isinstance(b, float) and np.isnan(a):
        return np.isnan(b)
    return a == b


def test_backend_selection():
    assert kernels.BACKEND in ("cython", "python")
    assert kernels.backend("python") is _fallback
    assert kernels.backend("cython") is cy
    with pytest.raises(ValueError):
        kernels.backend("fortran")


def test_env_var_selects_fallback():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-c", "import logbranch; print(logbranch.BACKEND)"],
                         env={**os.environ, "LOGBRANCH_BACKEND": "python"}, capture_output=True, text=True)
    assert out.stdout.strip() == "python"


@given(st.integers(0, 2**63), st.integers(0, 30), st.integers(0, 30), st.floats(0.0, 2.0),
       st.booleans(), st.floats(0.5, 30.0))
def test_ctmc_equal(seed, a, b, theta, record, horizon):
    params = ModelParams(20, moran_family(1), theta, theta / 2)
    from logbranch.forward import _kernel_args

    args = _kernel_args(params)
    grid = np.linspace(0, horizon, 7)
    for stop in ((0, 2**62), (3, 40)):
        r1 = cy.ctmc_run(rng(seed), a, b, *args, horizon, grid, stop[0], stop[1], record, 1e12)
        r2 = _fallback.ctmc_run(rng(seed), a, b, *args, horizon, grid, stop[0], stop[1], record, 1e12)
        assert same(r1, r2)


@given(st.integers(0, 2**63), st.floats(0.0, 1.0), st.floats(0.0, 2.0), st.booleans())
def test_sde_equal(seed, w0, theta, record):
    grid_steps = np.array([0, 10, 250, 400], dtype=np.int64)
    r1 = cy.sde_run(rng(seed), w0, 1.0, theta, 0.0, 2.0, 0.0, 1e-3, 400, grid_steps, record)
    r2 = _fallback.sde_run(rng(seed), w0, 1.0, theta, 0.0, 2.0, 0.0, 1e-3, 400, grid_steps, record)
    assert same(r1, r2)


@given(st.integers(0, 2**63), st.integers(0, 12), st.floats(0.0, 2.0), st.booleans())
def test_dual_equal(seed, n0, theta, record):
    grid = np.array([0.0, 0.3, 1.0])
    r1 = cy.dual_run(rng(seed), n0, theta, 1.0, 2.0, 0.0, 2.0, grid, record)
    r2 = _fallback.dual_run(rng(seed), n0, theta, 1.0, 2.0, 0.0, 2.0, grid, record)
    assert same(r1, r2)


@pytest.mark.parametrize("mode", [0, 1, 2])
@pytest.mark.parametrize("seed", [0, 7, 2**40 + 3])
def test_graphical_and_backward_equal(mode, seed):
    K = 40
    params = ModelParams(K, poisson_family(1.0, 2.0, 0.0, 8))
    ii, jj, mass = build_coupling(params).arrays()
    args = (20, 20, ii, jj, mass, 1.0 / K, K, 30, 50, 0.5, mode, 1000)
    s1, a1 = cy.graphical_run(rng(seed), *args)
    s2, a2 = _fallback.graphical_run(rng(seed), *args)
    assert same(s1, s2) and same(a1, a2)
    if a1 is None:
        return
    for aux, fb in ((False, False), (True, False), (True, True)):
        b1 = cy.asg_backward(rng(seed + 1), *a1, 6, 0.5, aux, 8, 50, fb)
        b2 = _fallback.asg_backward(rng(seed + 1), *a2, 6, 0.5, aux, 8, 50, fb)
        assert same(b1, b2)


@given(st.integers(0, 2**63))
def test_branching_classes_equal(seed):
    c1 = np.array([[1, 0], [0, 2], [3, 1]], dtype=np.int64)
    c2 = c1.copy()
    p_i, p_r = np.array([0, 2, 3]), np.array([0.5, 1.0, 0.25])
    m_i, m_r = np.array([0, 2]), np.array([0.6, 1.1])
    r1 = cy.branching_classes(rng(seed), c1, p_i, p_r, m_i, m_r, 200, 50.0)
    r2 = _fallback.branching_classes(rng(seed), c2, p_i, p_r, m_i, m_r, 200, 50.0)
    assert same(r1, r2) and np.array_equal(c1, c2)


def test_benchmark_script_runs(capsys):
    import runpy
    from pathlib import Path

    bench = runpy.run_path(str(Path(__file__).parent.parent / "benchmarks" / "bench_kernels.py"))
    assert bench["main"](["--repeat", "1", "--scale", "0.02"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1 + len(bench["WORKLOADS"]) and all(l.endswith("True") for l in lines[1:])
