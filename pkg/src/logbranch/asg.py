"""Graphical construction of the population and the ancestral selection graph.

Reproduction events are drawn from a Poisson stream with intensity
``K * N_up * nu_K(i, j)`` in rescaled time and thinned to the actual size
``N``.  After an accepted event the offspring occupy labels ``1..i`` (blue)
and, for a ``+`` parent, ``i+1..i+j`` (red); the top ``j`` labels are the
ones a red branch would also have to land on.  Competition deaths form a
separate ``(0, 0)`` stream with intensity ``K * (m/K) * N_up**2``, thinned by
``(N / N_up)**2``.

Backward in time a sample of ``n`` lineages among ``N`` labels falls onto
``b`` blue, ``r`` red and ``mm`` top labels with multivariate hypergeometric
weights.  ``r >= 1`` together with ``mm >= 1`` sends the count to the
cemetery; otherwise the count becomes ``n - b + 1{b + r >= 1}``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Iterator

import numpy as np

from . import kernels
from .forward import PopulationState, Trajectory
from .measures import CouplingMeasure, LawFamily, ModelParams, build_coupling
from .rng import as_rng

__all__ = [
    "CEMETERY",
    "EventLog",
    "EventRecord",
    "GeometryViolation",
    "LineagePath",
    "SampleTooLarge",
    "TransitionDistribution",
    "AuxiliaryResult",
    "auxiliary_process",
    "band_limits",
    "brute_force_distribution",
    "default_epsilon",
    "generator_limit_probe",
    "kappa_for",
    "lineage_counting",
    "p_hat_minus",
    "p_hat_plus",
    "p_minus",
    "p_plus",
    "simulate_graphical",
    "transition_distribution",
]

CEMETERY = -1


class GeometryViolation(ValueError):
    """Fewer labels than the blue, red and top categories need."""


class SampleTooLarge(ValueError):
    """More sampled lineages than individuals alive at the sampling time."""


def default_epsilon(K: int) -> float:
    return K ** -0.25


def band_limits(K: int, epsilon: float | None = None) -> tuple[int, int]:
    """``(N_down, N_up) = (floor((1 - eps) K), ceil((1 + eps) K))``."""
    eps = default_epsilon(K) if epsilon is None else epsilon
    return int(math.floor((1 - eps) * K + 1e-9)), int(math.ceil((1 + eps) * K - 1e-9))


def kappa_for(L: int) -> float:
    """Largest admissible ``(i + j) / K`` for the coupled regime with ``L`` lineages."""
    if L < 1:
        raise ValueError("L must be at least 1")
    return 1.0 / (20 * L)


# ---------------------------------------------------------------------------
# exact transition law


def _check_geometry(i: int, j: int, n: int, N: int) -> None:
    if min(i, j, n) < 0 or n > N:
        raise ValueError("need i, j >= 0 and 0 <= n <= N")
    if N < i + 2 * j:
        raise GeometryViolation(f"N={N} < i + 2j = {i + 2 * j}")


def _next_count(n: int, b: int, r: int, mm: int) -> int:
    if r >= 1 and mm >= 1:
        return CEMETERY
    return n - b + (1 if b + r >= 1 else 0)


@dataclass(frozen=True)
class TransitionDistribution:
    """Law of the lineage count after one accepted event.

    ``probs`` maps the next count (``CEMETERY`` for the cemetery) to its
    probability.
    """

    n: int
    probs: dict

    def __getitem__(self, count: int):
        return self.probs.get(count, 0)

    @property
    def up(self):
        return self[self.n + 1]

    @property
    def down(self):
        return self[self.n - 1] if self.n >= 2 else 0

    @property
    def stay(self):
        return self[self.n]

    @property
    def cemetery(self):
        return self[CEMETERY]

    def multi(self, k: int):
        """Probability that exactly ``k >= 3`` lineages hit blue labels."""
        return self[self.n - k + 1] if 3 <= k <= self.n else 0

    def total(self):
        return sum(self.probs.values())


def transition_distribution(i: int, j: int, n: int, N: int, exact: bool = True) -> TransitionDistribution:
    """Enumerate hit counts ``(b, r, mm)`` and aggregate by next lineage count."""
    _check_geometry(i, j, n, N)
    c = i + 2 * j
    denom = math.comb(N, n)
    probs: dict[int, object] = {}
    for b in range(min(i, n) + 1):
        for r in range(min(j, n - b) + 1):
            for mm in range(min(j, n - b - r) + 1):
                w = math.comb(i, b) * math.comb(j, r) * math.comb(j, mm) * math.comb(N - c, n - b - r - mm)
                if w == 0:
                    continue
                key = _next_count(n, b, r, mm)
                probs[key] = probs.get(key, 0) + w
    scale = (lambda w: Fraction(w, denom)) if exact else (lambda w: w / denom)
    return TransitionDistribution(n, {k: scale(w) for k, w in probs.items()})


def brute_force_hits(i: int, j: int, n: int, N: int) -> dict:
    """Law of the hit counts ``(blue, red, top)`` of a uniform ``n``-subset,
    by listing every subset of the ``N`` labels."""
    _check_geometry(i, j, n, N)
    blue = set(range(1, i + 1))
    red = set(range(i + 1, i + j + 1))
    top = set(range(N - j + 1, N + 1))
    counts: dict[tuple, int] = {}
    total = 0
    for subset in combinations(range(1, N + 1), n):
        s = set(subset)
        key = (len(s & blue), len(s & red), len(s & top))
        counts[key] = counts.get(key, 0) + 1
        total += 1
    return {k: Fraction(v, total) for k, v in counts.items()}


def brute_force_distribution(i: int, j: int, n: int, N: int) -> TransitionDistribution:
    """Same law as :func:`transition_distribution` by subset enumeration."""
    probs: dict[int, Fraction] = {}
    for (b, r, mm), w in brute_force_hits(i, j, n, N).items():
        key = _next_count(n, b, r, mm)
        probs[key] = probs.get(key, 0) + w
    return TransitionDistribution(n, probs)


def closed_form_events(i: int, j: int, n: int, N: int) -> dict:
    """Enumerated masses of the events behind ``p_plus``, ``p_hat_plus``,
    ``p_minus`` and ``p_hat_minus``."""
    hits = brute_force_hits(i, j, n, N)

    def mass(pred):
        return sum((w for k, w in hits.items() if pred(*k)), Fraction(0))

    return {
        "p_plus": mass(lambda b, r, mm: b == 0 and r == 1 and mm == 0),
        "p_hat_plus": mass(lambda b, r, mm: b == 0 and r >= 2 and mm == 0),
        "p_minus": mass(lambda b, r, mm: b == 2 and r == 0),
        "p_hat_minus": mass(lambda b, r, mm: b == 2 and r >= 1 and mm == 0),
    }


def _num(x: int, exact: bool):
    return Fraction(x) if exact else float(x)


def p_plus(i: int, j: int, n: int, N: int, exact: bool = True):
    """Exactly one lineage on a red label, none on blue or top labels."""
    _check_geometry(i, j, n, N)
    if n < 1 or j == 0:
        return _num(0, exact)
    one = _num(1, exact)
    val = n * (_num(j, exact) / N)
    for k in range(1, n):
        val *= one - _num(i + 2 * j - 1, exact) / (N - k)
    return val


def p_hat_plus(i: int, j: int, n: int, N: int, exact: bool = True):
    """At least two lineages on red labels, none on blue or top labels."""
    _check_geometry(i, j, n, N)
    c = i + 2 * j
    num = sum(math.comb(j, l) * math.comb(N - c, n - l) for l in range(2, min(j, n) + 1))
    return Fraction(num, math.comb(N, n)) if exact else num / math.comb(N, n)


def p_minus(i: int, j: int, n: int, N: int, exact: bool = True):
    """Exactly two lineages on blue labels and none on red labels."""
    _check_geometry(i, j, n, N)
    if n < 2 or i < 2:
        return _num(0, exact)
    one = _num(1, exact)
    val = _num(n * (n - 1) // 2 * i * (i - 1), exact) / (N * (N - 1))
    for k in range(2, n):
        val *= one - _num(i + j - 2, exact) / (N - k)
    return val


def p_hat_minus(i: int, j: int, n: int, N: int, exact: bool = True):
    """Exactly two lineages on blue labels, at least one on red, none on top."""
    _check_geometry(i, j, n, N)
    c = i + 2 * j
    num = sum(
        math.comb(i, 2) * math.comb(j, l) * math.comb(N - c, n - 2 - l) for l in range(1, min(j, n - 2) + 1)
    )
    return Fraction(num, math.comb(N, n)) if exact else num / math.comb(N, n)


def p_bar(i: int, j: int, n: int, N: int, exact: bool = True):
    """Mass of every outcome other than stay and the single up or down steps
    counted by :func:`p_plus` and :func:`p_minus`."""
    d = transition_distribution(i, j, n, N, exact)
    rest = d.cemetery + sum(d.multi(k) for k in range(3, n + 1))
    return rest + p_hat_plus(i, j, n, N, exact) + p_hat_minus(i, j, n, N, exact)


# ---------------------------------------------------------------------------
# forward pass


@dataclass(frozen=True)
class EventRecord:
    t: float
    i: int
    j: int
    accepted: bool
    post_size: int
    parent_type: str | None

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "i": self.i,
            "j": self.j,
            "accepted": self.accepted,
            "post_size": self.post_size,
            "parent_type": self.parent_type,
        }


@dataclass
class EventLog:
    """Array-backed record of the event stream on ``[0, T]``.

    With ``mode == "relevant"`` only events able to move a lineage (``i >= 2``
    or ``j >= 1``) are stored; ``mode == "all"`` keeps every candidate.
    """

    t: np.ndarray
    i: np.ndarray
    j: np.ndarray
    post_size: np.ndarray
    flags: np.ndarray
    T: float
    K: int
    n_down: int
    n_up: int
    initial: PopulationState
    mode: str
    summary: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def accepted(self) -> np.ndarray:
        return (self.flags & kernels.ACCEPTED) != 0

    @property
    def final_size(self) -> int:
        return int(self.summary["n_plus"] + self.summary["n_minus"])

    @property
    def frozen(self) -> bool:
        return bool(self.summary["frozen"])

    def record(self, k: int) -> EventRecord:
        f = int(self.flags[k])
        acc = bool(f & kernels.ACCEPTED)
        ptype = ("+" if f & kernels.PARENT_PLUS else "-") if acc else None
        return EventRecord(float(self.t[k]), int(self.i[k]), int(self.j[k]), acc, int(self.post_size[k]), ptype)

    def __iter__(self) -> Iterator[EventRecord]:
        return (self.record(k) for k in range(len(self)))

    def count_path(self) -> Trajectory:
        """Forward counts in rescaled time; needs a complete (``"all"``) log."""
        if self.mode != "all":
            raise ValueError("count paths need a log recorded with mode='all'")
        a, b = self.initial.n_plus, self.initial.n_minus
        ts, ps, ms = [0.0], [a], [b]
        acc = self.accepted
        plus = (self.flags & kernels.PARENT_PLUS) != 0
        for k in np.nonzero(acc)[0]:
            i, j = int(self.i[k]), int(self.j[k])
            if plus[k]:
                a += i + j - 1
            else:
                b += i - 1
            ts.append(float(self.t[k]))
            ps.append(a)
            ms.append(b)
        return Trajectory(np.array(ts), np.array(ps, dtype=np.int64), np.array(ms, dtype=np.int64),
                          "frozen" if self.frozen else "horizon", self.T)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self:
                fh.write(json.dumps(rec.to_json()) + "\n")


def simulate_graphical(
    params: ModelParams,
    coupling: CouplingMeasure | None = None,
    T: float = 1.0,
    initial: PopulationState | None = None,
    rng_seed=0,
    *,
    epsilon: float | None = None,
    mode: str = "relevant",
) -> tuple[EventLog, Trajectory | None]:
    """Run the thinned event stream on ``[0, T]`` (rescaled time).

    Returns the event log and, for ``mode="all"``, the forward count path.
    """
    if mode not in ("all", "relevant", "none"):
        raise ValueError("mode must be 'all', 'relevant' or 'none'")
    K = params.K
    nu = build_coupling(params) if coupling is None else coupling
    initial = initial or PopulationState(K, 0)
    n_down, n_up = band_limits(K, epsilon)
    if not n_down <= initial.total <= n_up:
        raise ValueError(f"initial size {initial.total} outside [{n_down}, {n_up}]")
    ii, jj, mass = nu.arrays()
    comp = float(params.family.m) / K
    if mode == "all":
        rate = K * (n_up * float(mass.sum()) + comp * n_up * n_up)
    else:
        rel = (ii >= 2) | (jj >= 1)
        rate = K * n_up * float(mass[rel].sum())
    capacity = int(rate * T + 10 * math.sqrt(rate * T + 1) + 16)
    code = {"all": 0, "relevant": 1, "none": 2}[mode]
    summary, arrays = kernels.graphical_run(
        as_rng(rng_seed), initial.n_plus, initial.n_minus, ii, jj, mass, comp, K, n_down, n_up,
        float(T), code, capacity,
    )
    if arrays is None:
        arrays = (np.zeros(0), np.zeros(0, np.int16), np.zeros(0, np.int16), np.zeros(0, np.int32),
                  np.zeros(0, np.int8))
    log = EventLog(*arrays, T=float(T), K=K, n_down=n_down, n_up=n_up, initial=initial, mode=mode,
                   summary=summary)
    return log, (log.count_path() if mode == "all" else None)


# ---------------------------------------------------------------------------
# backward passes


@dataclass
class LineagePath:
    """Lineage counts against backward time; ``CEMETERY`` marks the cemetery."""

    t: np.ndarray
    count: np.ndarray
    m: int
    T: float
    stats: dict = field(default_factory=dict)

    @property
    def final(self) -> int:
        return int(self.count[-1])

    @property
    def absorbed(self) -> bool:
        return self.final == CEMETERY

    def value_at(self, tb: float) -> int:
        k = int(np.searchsorted(self.t, tb, side="right")) - 1
        return int(self.count[max(k, 0)])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_backward", "count"])
            for a, b in zip(self.t.tolist(), self.count.tolist()):
                w.writerow([repr(a), b])


def _backward(log: EventLog, m: int, rng_seed, aux: bool, L: int, fallback: bool) -> dict:
    if m < 1:
        raise ValueError("sample size must be at least 1")
    if m > log.final_size:
        raise SampleTooLarge(f"sample of {m} from a population of {log.final_size}")
    if log.mode == "none":
        raise ValueError("log holds no events")
    return kernels.asg_backward(as_rng(rng_seed), log.t, log.i, log.j, log.post_size, log.flags,
                                int(m), log.T, aux, int(L), log.n_up, fallback)


_STAT_KEYS = ("ups", "downs", "multi_merges", "lineage_time", "pair_time", "cemetery_time")


def lineage_counting(log: EventLog, m: int, rng_seed=0) -> LineagePath:
    """Backward lineage-counting chain of a sample of ``m`` taken at time ``T``."""
    res = _backward(log, m, rng_seed, False, 0, False)
    return LineagePath(np.array(res["a_times"]), np.array(res["a_counts"], dtype=np.int64), m, log.T,
                       {k: res[k] for k in _STAT_KEYS})


@dataclass
class AuxiliaryResult:
    A: LineagePath
    B: LineagePath
    tau: float
    sigma: float
    fallback: bool

    @property
    def decoupled_before_sigma(self) -> bool:
        """Whether ``tau < min(sigma, T)``."""
        return self.tau < min(self.sigma, self.A.T)


def auxiliary_process(log: EventLog, L: int, rng_seed=0, m: int = 1) -> AuxiliaryResult:
    """Lineage count ``A`` together with the auxiliary chain ``B`` whose jump
    probabilities use ``N_up`` in place of the actual size."""
    if L < 2:
        raise ValueError("L must be at least 2")
    fallback = log.frozen or log.summary["max_ij"] > kappa_for(L) * log.K
    res = _backward(log, m, rng_seed, True, L, fallback)
    A = LineagePath(np.array(res["a_times"]), np.array(res["a_counts"], dtype=np.int64), m, log.T,
                    {k: res[k] for k in _STAT_KEYS})
    B = LineagePath(np.array(res["b_times"]), np.array(res["b_counts"], dtype=np.int64), m, log.T)
    return AuxiliaryResult(A, B, res["tau"], res["sigma"], fallback)


# ---------------------------------------------------------------------------
# limits of the scaled jump rates


def generator_limit_probe(family: LawFamily, ns, Ks, exact: bool = True) -> list[dict]:
    """``K**2 * sum_{i,j} p(n, K) nu_K(i, j)`` for ``p`` in ``p_plus``,
    ``p_minus`` and ``p_bar``, next to the limits ``n s`` and
    ``C(n, 2) (m + v)``."""
    s = family.s_plus - family.s_minus
    v = family.v_minus
    rows = []
    for K in Ks:
        nu = build_coupling(ModelParams(int(K), family))
        ex = exact and nu.exact
        for n in ns:
            sums = {"plus": 0, "minus": 0, "bar": 0}
            for i, j, w in nu.atoms:
                if K < i + 2 * j or n > K:
                    continue
                w = w if ex else float(w)
                sums["plus"] += p_plus(i, j, n, K, ex) * w
                sums["minus"] += p_minus(i, j, n, K, ex) * w
                sums["bar"] += p_bar(i, j, n, K, ex) * w
            rows.append({
                "K": int(K),
                "n": int(n),
                "plus_sum": float(K * K * sums["plus"]),
                "minus_sum": float(K * K * sums["minus"]),
                "bar_sum": float(K * K * sums["bar"]),
                "plus_target": n * s,
                "minus_target": n * (n - 1) / 2 * (family.m + v),
            })
    return rows
