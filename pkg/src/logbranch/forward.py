"""Exact simulation of the two-type logistic branching chain.

The chain lives on pairs ``(n_plus, n_minus)``.  An individual of type
``±`` is replaced by ``i >= 1`` offspring at rate ``mu_K(i)``, dies at rate
``mu_K(0) + N * m / K`` and switches type at rate ``theta / K``.  Paths are
simulated in natural time; :func:`rescale_frequency` maps them to the
``X_K(t) = N(Kt) / K`` scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .measures import ModelParams, ReproductionLaw, mean_rate
from .rng import as_rng

__all__ = [
    "FrequencyPath",
    "PopulationState",
    "RateOverflow",
    "SizeStop",
    "Trajectory",
    "birth_tables",
    "concentration_probe",
    "rescale_frequency",
    "simulate",
    "stopping_time_T_beta",
    "transition_rates",
]

DEFAULT_MAX_RATE = 1e12
STATUS_NAMES = {
    kernels.HORIZON: "horizon",
    kernels.ABSORBED: "absorbed",
    kernels.STOPPED: "stopped",
    kernels.OVERFLOW: "overflow",
}


class RateOverflow(RuntimeError):
    """Total event rate exceeded the configured bound."""


@dataclass(frozen=True, order=True)
class PopulationState:
    n_plus: int
    n_minus: int

    def __post_init__(self):
        if self.n_plus < 0 or self.n_minus < 0:
            raise ValueError("type counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.n_plus + self.n_minus


@dataclass(frozen=True)
class SizeStop:
    """Stop once the total size is ``>= hi`` or ``< lo``."""

    lo: int = 0
    hi: int = 2**62


def _exact_params(params: ModelParams) -> bool:
    return (
        params.plus_law.exact
        and params.minus_law.exact
        and _rational(params.theta_plus)
        and _rational(params.theta_minus)
    )


def _rational(x) -> bool:
    return not isinstance(x, float) or x.is_integer()


def transition_rates(state: PopulationState, params: ModelParams) -> list[tuple[object, PopulationState]]:
    """All transitions out of ``state`` with positive rate.

    Rates are Fractions when the laws and mutation intensities are rational.
    Rows are ordered: births of ``+`` by offspring count, births of ``-``,
    death of ``+``, death of ``-``, mutation ``+ -> -``, mutation ``- -> +``.
    """
    p, q = state.n_plus, state.n_minus
    K = params.K
    if _exact_params(params):
        m = mean_rate(params.family.limit_plus)
        comp = (Fraction(m) if float(m) == params.family.m else Fraction(params.family.m)) / K
        th_p, th_m = Fraction(params.theta_plus) / K, Fraction(params.theta_minus) / K
    else:
        comp = params.family.m / K
        th_p, th_m = params.theta_plus / K, params.theta_minus / K
    N = p + q
    rows: list[tuple[object, PopulationState]] = []
    for i, mass in params.plus_law.atoms:
        if i >= 1:
            rows.append((p * mass, PopulationState(p + i - 1, q)))
    for i, mass in params.minus_law.atoms:
        if i >= 1:
            rows.append((q * mass, PopulationState(p, q + i - 1)))
    rows.append((p * params.plus_law[0] + p * N * comp, PopulationState(max(p - 1, 0), q)))
    rows.append((q * params.minus_law[0] + q * N * comp, PopulationState(p, max(q - 1, 0))))
    rows.append((p * th_p, PopulationState(max(p - 1, 0), q + 1)))
    rows.append((q * th_m, PopulationState(p + 1, max(q - 1, 0))))
    return [(r, s) for r, s in rows if r > 0]


def birth_tables(law: ReproductionLaw) -> tuple[np.ndarray, np.ndarray]:
    """Offspring counts ``i >= 2`` and rates; ``i = 1`` changes nothing and is dropped."""
    atoms = [(i, float(m)) for i, m in law.atoms if i >= 2 and m > 0]
    return (
        np.array([i for i, _ in atoms], dtype=np.int64),
        np.array([m for _, m in atoms], dtype=np.float64),
    )


@dataclass
class Trajectory:
    """Recorded path.  ``sampled`` paths hold states on a fixed time grid
    (``-1`` after an early stop) instead of every event."""

    t: np.ndarray
    n_plus: np.ndarray
    n_minus: np.ndarray
    status: str = "horizon"
    end_time: float = 0.0
    sampled: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def total(self) -> np.ndarray:
        return self.n_plus + self.n_minus

    @property
    def final(self) -> PopulationState:
        return PopulationState(int(self.n_plus[-1]), int(self.n_minus[-1]))

    def state(self, index: int) -> PopulationState:
        return PopulationState(int(self.n_plus[index]), int(self.n_minus[index]))

    def state_at(self, time: float) -> PopulationState:
        """State after the last event at or before ``time``."""
        if self.sampled:
            raise ValueError("state_at needs a fully recorded path")
        k = int(np.searchsorted(self.t, time, side="right")) - 1
        return self.state(max(k, 0))

    def check_steps(self, params: ModelParams) -> bool:
        """True when each recorded step is one row of the rate table."""
        if self.sampled:
            raise ValueError("step checks need a fully recorded path")
        if np.any(np.diff(self.t) <= 0):
            return False
        for k in range(1, len(self.t)):
            prev, cur = self.state(k - 1), self.state(k)
            if cur not in {s for _, s in transition_rates(prev, params)} and cur != prev:
                return False
        return True

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "n_plus", "n_minus"])
            for t, a, b in zip(self.t.tolist(), self.n_plus.tolist(), self.n_minus.tolist()):
                w.writerow([repr(t), a, b])


@dataclass
class FrequencyPath:
    t: np.ndarray
    x_plus: np.ndarray
    x_minus: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @property
    def w(self) -> np.ndarray:
        """Frequency of type ``-`` (NaN where the population is empty)."""
        tot = self.x_plus + self.x_minus
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, self.x_minus / np.where(tot > 0, tot, 1), np.nan)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x_plus", "x_minus"])
            for row in zip(self.t.tolist(), self.x_plus.tolist(), self.x_minus.tolist()):
                w.writerow([repr(x) for x in row])


def _kernel_args(params: ModelParams):
    bp_i, bp_r = birth_tables(params.plus_law)
    bm_i, bm_r = birth_tables(params.minus_law)
    K = params.K
    return (
        bp_i,
        bp_r,
        bm_i,
        bm_r,
        float(params.plus_law[0]),
        float(params.minus_law[0]),
        float(params.family.m) / K,
        float(params.theta_plus) / K,
        float(params.theta_minus) / K,
    )


def simulate(
    initial: PopulationState,
    params: ModelParams,
    horizon: float,
    stop: SizeStop | Callable[[float, PopulationState], bool] | None = None,
    rng_seed=0,
    *,
    grid=None,
    max_rate: float = DEFAULT_MAX_RATE,
) -> Trajectory:
    """Gillespie path of the chain on ``[0, horizon]`` in natural time.

    ``stop`` is a :class:`SizeStop` (handled inside the compiled loop) or an
    arbitrary predicate ``stop(t, state)`` (handled by the Python loop).
    With ``grid`` the path is sampled at those times only.
    """
    if not horizon >= 0:
        raise ValueError("horizon must be nonnegative")
    rng = as_rng(rng_seed)
    args = _kernel_args(params)
    lo, hi = 0, 2**62
    stop_fn = None
    if isinstance(stop, SizeStop):
        lo, hi = stop.lo, stop.hi
    elif stop is not None:
        stop_fn = lambda t, a, b: bool(stop(t, PopulationState(a, b)))  # noqa: E731
    g = np.zeros(0) if grid is None else np.asarray(grid, dtype=np.float64)
    if g.size and (np.any(np.diff(g) < 0) or g[0] < 0):
        raise ValueError("grid must be nondecreasing and nonnegative")
    record = grid is None
    run = kernels.ctmc_run
    extra = {}
    if stop_fn is not None:
        from . import _fallback

        run, extra = _fallback.ctmc_run, {"stop_fn": stop_fn}
    status, t_end, a, b, gp, gm, rt, rp, rm = run(
        rng, initial.n_plus, initial.n_minus, *args, float(horizon), g, lo, hi, record, max_rate, **extra
    )
    if status == kernels.OVERFLOW:
        raise RateOverflow(f"total rate exceeded {max_rate:g} at t={t_end:g}, state ({a}, {b})")
    if record:
        return Trajectory(rt, rp, rm, STATUS_NAMES[status], t_end)
    return Trajectory(g.copy(), gp, gm, STATUS_NAMES[status], t_end, sampled=True)


def stopping_time_T_beta(traj: Trajectory, K: int, beta: float) -> float | None:
    """First recorded time with total size ``>= K - K**beta``."""
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    hit = np.nonzero(traj.total >= K - K**beta)[0]
    return float(traj.t[hit[0]]) if hit.size else None


def beta_threshold(K: int, beta: float) -> int:
    """Smallest integer size that is ``>= K - K**beta``."""
    return int(math.ceil(K - K**beta - 1e-9))


def rescale_frequency(traj: Trajectory, K: int) -> FrequencyPath:
    return FrequencyPath(traj.t / K, traj.n_plus / K, traj.n_minus / K)


def band(K: int, epsilon: float) -> tuple[int, int]:
    """Integer sizes ``N`` with ``(1 - eps) K <= N <= (1 + eps) K``."""
    lo = max(int(math.ceil((1 - epsilon) * K - 1e-9)), 0)
    hi = int(math.floor((1 + epsilon) * K + 1e-9))
    return lo, hi


def concentration_probe(
    params: ModelParams,
    T: float,
    epsilon: float,
    replicates: int,
    rng_seed=0,
    start: PopulationState | None = None,
) -> float:
    """Fraction of paths with ``N(Kt)/K`` inside ``[1 - eps, 1 + eps]`` for all ``t <= T``."""
    from .rng import STREAM_FORWARD, replicate_rng

    K = params.K
    start = start or PopulationState(K, 0)
    lo, hi = band(K, epsilon)
    inside = 0
    for r in range(replicates):
        traj = simulate(
            start, params, K * T, SizeStop(lo, hi + 1), replicate_rng(rng_seed, r, STREAM_FORWARD), grid=[]
        )
        inside += traj.status != "stopped"
    return inside / replicates
