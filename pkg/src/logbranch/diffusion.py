"""Frequency diffusion, its moment dual and the deterministic flow onto the
line ``x_plus + x_minus = 1``.

``W`` is the frequency of type ``-``.  Its generator is
``drift(w) f'(w) + diffusion_coefficient(w) f''(w) / 2`` with

* ``drift(w) = -D w (1 - w) + theta_plus (1 - w) - theta_minus w``,
  ``D = (s_plus - v_plus) - (s_minus - v_minus)``
* ``diffusion_coefficient(w) = (m + v_minus) w (1 - w) - (v_plus - v_minus) w^2 (1 - w)``.

The dual chain on ``{0, 1, 2, ...}`` steps down at rate
``theta_plus n + (m + v_minus) C(n, 2)`` and up at rate
``D n + (v_plus - v_minus) C(n, 2)``, and ``E[W(t)^n | w] = E[w^A(t) | n]``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp

from . import kernels
from .measures import LawFamily
from .rng import STREAM_DUAL, STREAM_SDE, as_rng, replicate_rng
from .stats import summary_stats, z_from

__all__ = [
    "DiffusionParams",
    "DualPath",
    "DualityReport",
    "InvalidDualParams",
    "NegativeVariance",
    "PlanePoint",
    "SDEPath",
    "default_dt",
    "diffusion_coefficient",
    "drift",
    "dual_values",
    "duality_check",
    "duality_grid",
    "gamma_projection",
    "generator_duality_residual",
    "katzenberger_flow",
    "sde_values",
    "simulate_dual",
    "simulate_sde",
]

NEG_TOL = 1e-12


class NegativeVariance(ValueError):
    """The diffusion coefficient is negative somewhere on [0, 1]."""


class InvalidDualParams(ValueError):
    """The dual chain would need a negative rate, or theta_minus != 0."""


@dataclass(frozen=True)
class DiffusionParams:
    m: float
    s_plus: float
    s_minus: float
    v_plus: float
    v_minus: float
    theta_plus: float = 0.0
    theta_minus: float = 0.0

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError("m must be positive")
        if not (self.v_plus > 0 and self.v_minus > 0):
            raise ValueError("v_plus and v_minus must be positive")
        if self.theta_plus < 0 or self.theta_minus < 0:
            raise ValueError("mutation intensities must be nonnegative")
        # w(1-w)(a - b w) >= 0 on [0, 1] iff a >= 0 and a - b >= 0
        if self.a - self.b < -NEG_TOL:
            raise NegativeVariance("need v_plus - v_minus <= m + v_minus")

    @property
    def selection(self) -> float:
        """``D = (s_plus - v_plus) - (s_minus - v_minus)``."""
        return (self.s_plus - self.v_plus) - (self.s_minus - self.v_minus)

    @property
    def a(self) -> float:
        return self.m + self.v_minus

    @property
    def b(self) -> float:
        return self.v_plus - self.v_minus

    @classmethod
    def from_family(cls, family: LawFamily, theta_plus: float = 0.0, theta_minus: float = 0.0):
        return cls(family.m, family.s_plus, family.s_minus, family.v_plus, family.v_minus,
                   float(theta_plus), float(theta_minus))

    @classmethod
    def moran(cls, s: float = 1.0, theta_plus: float = 0.0, theta_minus: float = 0.0):
        return cls(1.0, float(s), 0.0, 1.0, 1.0, float(theta_plus), float(theta_minus))

    def check_dual(self) -> None:
        if self.theta_minus != 0:
            raise InvalidDualParams("the dual needs theta_minus = 0")
        if self.selection < -1e-12:
            raise InvalidDualParams("the dual needs s_plus - v_plus >= s_minus - v_minus")
        if self.b < -1e-12:
            raise InvalidDualParams("the dual needs v_plus >= v_minus")


def drift(w: float, p: DiffusionParams) -> float:
    return -p.selection * w * (1 - w) + p.theta_plus * (1 - w) - p.theta_minus * w


def diffusion_coefficient(w: float, p: DiffusionParams) -> float:
    val = p.a * w * (1 - w) - p.b * w * w * (1 - w)
    if val < 0:
        if val < -NEG_TOL:
            raise NegativeVariance(f"diffusion coefficient {val} at w={w}")
        return 0.0
    return val


def default_dt(p: DiffusionParams) -> float:
    return 1e-4 * min(1.0, 1.0 / (p.m + p.v_plus + p.v_minus))


def _time_grid(horizon: float, dt: float) -> tuple[int, float]:
    nsteps = max(int(math.ceil(horizon / dt - 1e-9)), 0)
    return nsteps, (horizon / nsteps if nsteps else dt)


@dataclass
class SDEPath:
    t: np.ndarray
    value: np.ndarray

    def to_csv(self, path: str | Path) -> None:
        _write_tv(path, self.t, self.value)


@dataclass
class DualPath:
    t: np.ndarray
    value: np.ndarray

    def value_at(self, time: float) -> int:
        k = int(np.searchsorted(self.t, time, side="right")) - 1
        return int(self.value[max(k, 0)])

    def to_csv(self, path: str | Path) -> None:
        _write_tv(path, self.t, self.value)


def _write_tv(path, t, v) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "value"])
        for a, b in zip(np.asarray(t).tolist(), np.asarray(v).tolist()):
            w.writerow([repr(a), repr(b)])


def _sde_steps(times, horizon, dt):
    nsteps, h = _time_grid(horizon, dt)
    steps = np.array([int(round(t / h)) if nsteps else 0 for t in times], dtype=np.int64)
    return nsteps, h, steps


def simulate_sde(w0: float, p: DiffusionParams, horizon: float, dt: float | None = None,
                 rng_seed=0) -> SDEPath:
    """Euler-Maruyama path, clamped to [0, 1] after every step.

    The step is shrunk to ``horizon / ceil(horizon / dt)`` so the grid ends
    exactly at ``horizon``.
    """
    if not 0 <= w0 <= 1:
        raise ValueError("w0 must lie in [0, 1]")
    dt = default_dt(p) if dt is None else dt
    if not dt > 0:
        raise ValueError("dt must be positive")
    nsteps, h = _time_grid(horizon, dt)
    _, path = kernels.sde_run(as_rng(rng_seed), float(w0), p.selection, p.theta_plus,
                              p.theta_minus, p.a, p.b, h, nsteps, np.zeros(0, np.int64), True)
    return SDEPath(np.arange(nsteps + 1) * h, path)


def sde_values(w0: float, p: DiffusionParams, times, dt: float | None, rng) -> np.ndarray:
    """One path evaluated at ``times`` (snapped to the step grid)."""
    times = np.asarray(times, dtype=np.float64)
    dt = default_dt(p) if dt is None else dt
    horizon = float(times.max()) if times.size else 0.0
    nsteps, h, steps = _sde_steps(times, horizon, dt)
    order = np.argsort(steps, kind="stable")
    out, _ = kernels.sde_run(rng, float(w0), p.selection, p.theta_plus, p.theta_minus,
                             p.a, p.b, h, nsteps, steps[order], False)
    res = np.empty_like(out)
    res[order] = out
    return res


def simulate_dual(n0: int, p: DiffusionParams, horizon: float, rng_seed=0) -> DualPath:
    p.check_dual()
    if n0 < 0:
        raise ValueError("n0 must be nonnegative")
    _, rt, rn = kernels.dual_run(as_rng(rng_seed), int(n0), p.theta_plus, p.selection, p.a, p.b,
                                 float(horizon), np.zeros(0), True)
    return DualPath(np.array(rt, dtype=np.float64), np.array(rn, dtype=np.int64))


def dual_values(n0: int, p: DiffusionParams, times, rng) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    order = np.argsort(times, kind="stable")
    horizon = float(times.max()) if times.size else 0.0
    out, _, _ = kernels.dual_run(rng, int(n0), p.theta_plus, p.selection, p.a, p.b, horizon,
                                 times[order], False)
    res = np.empty_like(out)
    res[order] = out
    return res


def _pow_terms(w: float, n: int) -> tuple[float, float, float]:
    """``w**n``, ``n w**(n-1)`` and ``n (n-1) w**(n-2)`` without 0**negative."""
    f = w**n
    f1 = n * w ** (n - 1) if n >= 1 else 0.0
    f2 = n * (n - 1) * w ** (n - 2) if n >= 2 else 0.0
    return f, f1, f2


def generator_duality_residual(w: float, n: int, p: DiffusionParams) -> float:
    """Diffusion generator applied to ``w -> w**n`` minus the dual generator
    applied to ``k -> w**k`` at ``k = n``."""
    p.check_dual()
    f, f1, f2 = _pow_terms(w, n)
    lhs = drift(w, p) * f1 + 0.5 * diffusion_coefficient(w, p) * f2
    pairs = 0.5 * n * (n - 1)
    down = p.theta_plus * n + p.a * pairs
    up = p.selection * n + p.b * pairs
    up_val = w ** (n + 1)
    down_val = w ** (n - 1) if n >= 1 else 0.0
    rhs = down * (down_val - f) + up * (up_val - f)
    return lhs - rhs


@dataclass
class DualityReport:
    w0: float
    n0: int
    t: float
    lhs_mean: float
    lhs_se: float
    rhs_mean: float
    rhs_se: float
    z: float
    replicates: int
    seed: int
    dt: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def duality_grid(w0s, n0s, ts, p: DiffusionParams, replicates: int, seed: int,
                 dt: float | None = None, index_range: tuple[int, int] | None = None):
    """Raw per-replicate samples for every ``(w0, n0, t)`` cell.

    SDE paths are shared across ``n0`` and ``t``; dual paths across ``w0``
    and ``t``.  Returns ``(lhs, rhs)`` arrays of shape
    ``(len(w0s), len(n0s), len(ts), count)``.  ``index_range`` restricts the
    replicate indices so work can be split across processes.
    """
    p.check_dual()
    lo, hi = index_range or (0, replicates)
    ts = np.asarray(ts, dtype=np.float64)
    n0s = [int(n) for n in n0s]
    count = hi - lo
    lhs = np.empty((len(w0s), len(n0s), len(ts), count))
    rhs = np.empty_like(lhs)
    powers = np.array(n0s, dtype=np.float64)
    for a, w0 in enumerate(w0s):
        for r in range(lo, hi):
            vals = sde_values(w0, p, ts, dt, replicate_rng(seed, r, STREAM_SDE, a))
            lhs[a, :, :, r - lo] = vals[None, :] ** powers[:, None]
    for b, n0 in enumerate(n0s):
        for r in range(lo, hi):
            A = dual_values(n0, p, ts, replicate_rng(seed, r, STREAM_DUAL, b))
            for a, w0 in enumerate(w0s):
                rhs[a, b, :, r - lo] = float(w0) ** A
    return lhs, rhs


def reports_from_samples(w0s, n0s, ts, lhs, rhs, seed: int, dt: float) -> list[DualityReport]:
    out = []
    for a, w0 in enumerate(w0s):
        for b, n0 in enumerate(n0s):
            for c, t in enumerate(ts):
                lm, _, ls = summary_stats(lhs[a, b, c])
                rm, _, rs = summary_stats(rhs[a, b, c])
                out.append(DualityReport(float(w0), int(n0), float(t), lm, ls, rm, rs,
                                         z_from(lm, ls, rm, rs), lhs.shape[-1], seed, dt))
    return out


def duality_check(w0: float, n0: int, t: float, p: DiffusionParams, replicates: int,
                  rng_seed: int = 0, dt: float | None = None) -> DualityReport:
    """Monte Carlo estimates of ``E[W(t)^n0 | w0]`` and ``E[w0^A(t) | n0]``."""
    dt_used = default_dt(p) if dt is None else dt
    lhs, rhs = duality_grid([w0], [n0], [t], p, replicates, rng_seed, dt_used)
    return reports_from_samples([w0], [n0], [t], lhs, rhs, rng_seed, dt_used)[0]


@dataclass(frozen=True)
class PlanePoint:
    x_plus: float
    x_minus: float

    def __post_init__(self):
        if not self.x_plus + self.x_minus > 0:
            raise ValueError("point must have positive total mass")

    @property
    def norm(self) -> float:
        return self.x_plus + self.x_minus

    def as_array(self) -> np.ndarray:
        return np.array([self.x_plus, self.x_minus])


def gamma_projection(x: PlanePoint) -> PlanePoint:
    s = x.norm
    return PlanePoint(x.x_plus / s, x.x_minus / s)


def katzenberger_flow(x0: PlanePoint, t: float, m: float = 1.0, rtol: float = 1e-10) -> PlanePoint:
    """Solution at time ``t`` of ``x' = m (1 - (x_plus + x_minus)) x``."""
    if t == 0:
        return x0

    def field(_, x):
        return m * (1.0 - x[0] - x[1]) * x

    sol = solve_ivp(field, (0.0, float(t)), x0.as_array(), method="DOP853", rtol=rtol,
                    atol=rtol * 1e-2)
    if not sol.success:
        raise RuntimeError(sol.message)
    xp, xm = sol.y[:, -1]
    return PlanePoint(float(xp), float(xm))
