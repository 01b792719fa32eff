"""Labelled populations and the coupling between the logistic population and
the free branching process with the limiting laws.

Individuals carry Ulam-Harris labels: tuples of positive integers whose
children are ``u + (k,)``.  In the coupled chain a label alive in both
populations with the same type reproduces jointly at rate
``min(mu_inf(i), mu_K(i))``; the excess rates act on one side only, and
competition deaths and mutations act on the logistic side only.  Labels
created separately on the two sides coincide whenever the same parent has
the same number of children, so the populations can re-merge.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import kernels
from .forward import RateOverflow, beta_threshold
from .measures import ModelParams, ReproductionLaw
from .rng import STREAM_GENEALOGY, as_rng, replicate_rng

__all__ = [
    "CoupledPair",
    "CoupledRun",
    "Extinct",
    "FractionEstimate",
    "GrowthSample",
    "LabeledPopulation",
    "LabeledRun",
    "asymptotic_fraction_estimate",
    "descendant_fraction",
    "format_label",
    "growth_experiment",
    "growth_replicate",
    "is_descendant",
    "parse_label",
    "simulate_coupled",
    "simulate_labeled",
]

Label = tuple
PLUS, MINUS = 0, 1
TYPE_CHARS = "+-"


class Extinct(RuntimeError):
    """The population died out before the requested size was reached."""


def format_label(u: Label) -> str:
    return ".".join(str(k) for k in u)


def parse_label(text: str) -> Label:
    parts = tuple(int(k) for k in str(text).split("."))
    if not parts or min(parts) < 1:
        raise ValueError(f"bad label {text!r}")
    return parts


def is_descendant(v: Label, u: Label) -> bool:
    """``u`` is a prefix of ``v`` (every label descends from itself)."""
    return v[: len(u)] == u


@dataclass(frozen=True)
class LabeledPopulation:
    plus: frozenset = frozenset()
    minus: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "plus", frozenset(tuple(u) for u in self.plus))
        object.__setattr__(self, "minus", frozenset(tuple(u) for u in self.minus))
        if self.plus & self.minus:
            raise ValueError("a label cannot carry both types")

    @classmethod
    def from_types(cls, types: dict) -> "LabeledPopulation":
        return cls(
            frozenset(u for u, s in types.items() if s == PLUS),
            frozenset(u for u, s in types.items() if s == MINUS),
        )

    @property
    def size(self) -> int:
        return len(self.plus) + len(self.minus)

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.plus), len(self.minus)

    def labels(self) -> frozenset:
        return self.plus | self.minus

    def types(self) -> dict:
        out = {u: PLUS for u in self.plus}
        out.update({u: MINUS for u in self.minus})
        return out

    def is_antichain(self) -> bool:
        labels = self.labels()
        return not any(u[:k] in labels for u in labels for k in range(1, len(u)))

    def records(self, t: float) -> list[dict]:
        rows = [{"t": t, "type": "+", "label": format_label(u)} for u in sorted(self.plus)]
        rows += [{"t": t, "type": "-", "label": format_label(u)} for u in sorted(self.minus)]
        return rows


def descendant_fraction(pop: LabeledPopulation, u: Label) -> float:
    """Fraction of ``pop`` descending from ``u``; 0 for an empty population."""
    n = pop.size
    if n == 0:
        return 0.0
    u = tuple(u)
    return sum(1 for v in pop.labels() if is_descendant(v, u)) / n


@dataclass(frozen=True)
class CoupledPair:
    pop_inf: LabeledPopulation
    pop_K: LabeledPopulation

    @property
    def shared(self) -> frozenset:
        """Labels alive in both populations with the same type."""
        return (self.pop_inf.plus & self.pop_K.plus) | (self.pop_inf.minus & self.pop_K.minus)


def write_snapshots(path: str | Path, snapshots: Iterable[tuple[float, LabeledPopulation]]) -> None:
    with open(path, "w") as fh:
        for t, pop in snapshots:
            for row in pop.records(t):
                fh.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# event engine


class _Bag:
    """List with O(1) insertion, removal and uniform indexing."""

    __slots__ = ("items", "pos")

    def __init__(self):
        self.items: list = []
        self.pos: dict = {}

    def __len__(self) -> int:
        return len(self.items)

    def add(self, x) -> None:
        self.pos[x] = len(self.items)
        self.items.append(x)

    def discard(self, x) -> None:
        k = self.pos.pop(x, None)
        if k is None:
            return
        last = self.items.pop()
        if k < len(self.items):
            self.items[k] = last
            self.pos[last] = k


def _rows(law: ReproductionLaw) -> dict[int, float]:
    return {i: float(m) for i, m in law.atoms if m > 0}


class _Rates:
    """Per-capita rates of the coupled chain for one type."""

    def __init__(self, inf_law: ReproductionLaw, K_law: ReproductionLaw, theta_over_K: float):
        mi, mk = _rows(inf_law), _rows(K_law)
        support = sorted(set(mi) | set(mk))
        self.joint = [(i, min(mi.get(i, 0.0), mk.get(i, 0.0))) for i in support]
        self.solo_inf = [(i, mi.get(i, 0.0) - min(mi.get(i, 0.0), mk.get(i, 0.0))) for i in support]
        self.solo_K = [(i, mk.get(i, 0.0) - min(mi.get(i, 0.0), mk.get(i, 0.0))) for i in support]
        self.inf = sorted(mi.items())
        self.K = sorted(mk.items())
        self.mut = theta_over_K
        self.total_inf = sum(r for _, r in self.inf)
        self.total_K = sum(r for _, r in self.K)
        self.total_joint_side = sum(max(mi.get(i, 0.0), mk.get(i, 0.0)) for i in support)


def _pick(rows, x):
    """Walk ``(value, rate)`` rows; ``x`` is a point in ``[0, sum rates)``."""
    acc = 0.0
    last = None
    for value, rate in rows:
        if rate <= 0:
            continue
        acc += rate
        last = value
        if x < acc:
            return value, None
    return last, x - acc


# bag indices: category * 2 + type
JOINT, INF_ONLY, K_ONLY = 0, 1, 2


class _Engine:
    """Exact simulation of the coupled labelled chain.

    With ``lump`` set, infinite-side subtrees that can never meet the
    logistic side again are moved into per-class counts and evolved by the
    compiled free-branching kernel; ``classes`` are the founders they are
    counted under.
    """

    def __init__(self, params: ModelParams, inf_types: dict, K_types: dict, rng,
                 lump: bool = False, classes: list | None = None, max_rate: float = 1e12):
        self.K = params.K
        self.comp = float(params.family.m) / params.K
        fam = params.family
        self.rates = [
            _Rates(fam.limit_plus, params.plus_law, float(params.theta_plus) / params.K),
            _Rates(fam.limit_minus, params.minus_law, float(params.theta_minus) / params.K),
        ]
        self.inf = dict(inf_types)
        self.kp = dict(K_types)
        self.rng = rng
        self.t = 0.0
        self.events = 0
        self.max_rate = max_rate
        self.bags = [_Bag() for _ in range(6)]
        self.where: dict = {}
        for x in set(self.inf) | set(self.kp):
            self._place(x)
        self.lump = lump
        self.classes = list(classes or [])
        self.pool = np.zeros((max(len(self.classes), 1), 2), dtype=np.int64)
        self.pool_t = 0.0
        lp_i, lp_r = _kernel_law(fam.limit_plus)
        lm_i, lm_r = _kernel_law(fam.limit_minus)
        self.limit_tables = (lp_i, lp_r, lm_i, lm_r)

    # membership -------------------------------------------------------
    def _place(self, x) -> None:
        a, b = self.inf.get(x), self.kp.get(x)
        spots = []
        if a is not None and a == b:
            spots.append(JOINT * 2 + a)
        else:
            if a is not None:
                spots.append(INF_ONLY * 2 + a)
            if b is not None:
                spots.append(K_ONLY * 2 + b)
        for s in spots:
            self.bags[s].add(x)
        if spots:
            self.where[x] = spots

    def _unplace(self, x) -> None:
        for s in self.where.pop(x, ()):
            self.bags[s].discard(x)

    # lumping ----------------------------------------------------------
    def _class_of(self, x) -> int | None:
        for k, f in enumerate(self.classes):
            if is_descendant(x, f):
                return k
        return None

    def _detached(self, x) -> bool:
        """No logistic-side label is an ancestor, descendant or copy of ``x``."""
        if x in self.kp:
            return False
        for k in range(1, len(x)):
            if x[:k] in self.kp:
                return False
        n = len(x)
        return not any(len(y) > n and y[:n] == x for y in self.kp)

    def advance_pool(self, t: float) -> None:
        if t > self.pool_t and self.pool.sum() > 0:
            kernels.branching_classes(self.rng, self.pool, *self.limit_tables, 2**62, t - self.pool_t)
        self.pool_t = max(self.pool_t, t)

    def _maybe_detach(self, x, known: bool = False) -> None:
        if not self.lump or x not in self.inf or x in self.kp:
            return
        k = self._class_of(x)
        if k is None or not (known or self._detached(x)):
            return
        self.advance_pool(self.t)
        self.pool[k, self.inf.pop(x)] += 1
        self._unplace(x)

    # transitions ------------------------------------------------------
    def _reproduce(self, side: dict, x, i: int) -> list:
        s = side.pop(x)
        kids = [x + (k,) for k in range(1, i + 1)]
        for c in kids:
            side[c] = s
        return kids

    def _replace(self, x, i: int, on_inf: bool, on_K: bool) -> None:
        self._unplace(x)
        kids = []
        if on_inf:
            kids = self._reproduce(self.inf, x, i)
        if on_K:
            kids = self._reproduce(self.kp, x, i)
        for y in {x, *kids}:
            self._unplace(y)
            self._place(y)
        if self.lump:
            if on_inf and not on_K:
                for c in kids:
                    self._maybe_detach(c)

    def step(self, horizon: float) -> bool:
        """Perform one event; ``False`` when none happens before ``horizon``."""
        NK = len(self.kp)
        cpc = self.comp * NK
        cats = []
        total = 0.0
        for s in (PLUS, MINUS):
            r = self.rates[s]
            for cat, pc in (
                (JOINT, r.total_joint_side + cpc + r.mut),
                (INF_ONLY, r.total_inf),
                (K_ONLY, r.total_K + cpc + r.mut),
            ):
                n = len(self.bags[cat * 2 + s])
                if n and pc > 0:
                    cats.append((cat, s, n, pc))
                    total += n * pc
        if total <= 0:
            return False
        if total > self.max_rate:
            raise RateOverflow(f"total rate {total:g} exceeds {self.max_rate:g}")
        t_next = self.t + self.rng.standard_exponential() / total
        if t_next > horizon:
            return False
        self.t = t_next
        u = self.rng.random() * total
        acc = 0.0
        cat, s, n, pc = cats[-1]
        for row in cats:
            if u < acc + row[2] * row[3]:
                cat, s, n, pc = row
                break
            acc += row[2] * row[3]
        v = min((u - acc) / pc, n * (1 - 1e-16))
        idx = min(int(v), n - 1)
        w = (v - idx) * pc
        x = self.bags[cat * 2 + s].items[idx]
        r = self.rates[s]
        self.events += 1
        if cat == INF_ONLY:
            i, _ = _pick(r.inf, w)
            self._replace(x, i, True, False)
            return True
        if cat == JOINT:
            i, rest = _pick(r.joint, w)
            if rest is None:
                self._replace(x, i, True, True)
                return True
            i, rest = _pick(r.solo_inf, rest)
            if rest is None:
                self._replace(x, i, True, False)
                return True
            i, rest = _pick(r.solo_K, rest)
            if rest is None:
                self._replace(x, i, False, True)
                return True
            w = rest
        else:
            i, rest = _pick(r.K, w)
            if rest is None:
                self._replace(x, i, False, True)
                return True
            w = rest
        if w < cpc or r.mut <= 0:
            self._unplace(x)
            del self.kp[x]
            self._place(x)
            if cat == JOINT:
                # x survives on the infinite side only, with no relatives on the other
                self._maybe_detach(x, known=True)
        else:
            self._unplace(x)
            self.kp[x] = 1 - self.kp[x]
            self._place(x)
        return True

    def pair(self) -> CoupledPair:
        return CoupledPair(LabeledPopulation.from_types(self.inf), LabeledPopulation.from_types(self.kp))


def _kernel_law(law: ReproductionLaw) -> tuple[np.ndarray, np.ndarray]:
    """Offspring counts and rates for the lumped kernel (``i = 1`` is a no-op there)."""
    atoms = [(i, float(m)) for i, m in law.atoms if i != 1 and m > 0]
    return (np.array([i for i, _ in atoms], dtype=np.int64), np.array([m for _, m in atoms], dtype=np.float64))


# ---------------------------------------------------------------------------
# public simulators


@dataclass
class CoupledRun:
    final: CoupledPair
    t: float
    events: int
    path: list = field(default_factory=list)


@dataclass
class LabeledRun:
    final: LabeledPopulation
    t: float
    events: int
    path: list = field(default_factory=list)


def _check_initial(pop: LabeledPopulation) -> None:
    if not pop.is_antichain():
        raise ValueError("initial labels must be pairwise non-ancestral")


def simulate_coupled(
    initial: CoupledPair,
    params: ModelParams,
    horizon: float,
    stop: Callable[[float, CoupledPair], bool] | None = None,
    rng_seed=0,
    *,
    record: bool = False,
    max_events: int | None = None,
) -> CoupledRun:
    """Exact coupled path on ``[0, horizon]`` (natural time)."""
    _check_initial(initial.pop_inf)
    _check_initial(initial.pop_K)
    eng = _Engine(params, initial.pop_inf.types(), initial.pop_K.types(), as_rng(rng_seed))
    path = [(0.0, eng.pair())] if record else []
    while max_events is None or eng.events < max_events:
        if stop is not None and stop(eng.t, eng.pair()):
            break
        if not eng.step(horizon):
            break
        if record:
            path.append((eng.t, eng.pair()))
    return CoupledRun(eng.pair(), eng.t, eng.events, path)


def simulate_labeled(
    initial: LabeledPopulation,
    params: ModelParams,
    horizon: float,
    stop: Callable[[float, LabeledPopulation], bool] | None = None,
    rng_seed=0,
    *,
    record: bool = False,
    max_events: int | None = None,
) -> LabeledRun:
    """Exact path of the labelled logistic population."""
    _check_initial(initial)
    eng = _Engine(params, {}, initial.types(), as_rng(rng_seed))
    path = [(0.0, LabeledPopulation.from_types(eng.kp))] if record else []
    while max_events is None or eng.events < max_events:
        if stop is not None and stop(eng.t, LabeledPopulation.from_types(eng.kp)):
            break
        if not eng.step(horizon):
            break
        if record:
            path.append((eng.t, LabeledPopulation.from_types(eng.kp)))
    return LabeledRun(LabeledPopulation.from_types(eng.kp), eng.t, eng.events, path)


@dataclass(frozen=True)
class FractionEstimate:
    value: float
    extinct: bool
    size: int
    stop_size: int

    def __float__(self) -> float:
        return self.value


def _free_branching_fraction(counts: np.ndarray, in_u: np.ndarray, params: ModelParams,
                             stop_size: int, rng) -> FractionEstimate:
    fam = params.family
    p_i, p_r = _kernel_law(fam.limit_plus)
    m_i, m_r = _kernel_law(fam.limit_minus)
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    if counts.sum() < stop_size:
        kernels.branching_classes(rng, counts, p_i, p_r, m_i, m_r, int(stop_size), math.inf)
    size = int(counts.sum())
    if size == 0:
        return FractionEstimate(0.0, True, 0, stop_size)
    return FractionEstimate(float(counts[in_u].sum() / size), False, size, stop_size)


def asymptotic_fraction_estimate(
    params: ModelParams,
    u: Label,
    initial: LabeledPopulation,
    stop_size: int = 100_000,
    rng_seed=0,
) -> FractionEstimate:
    """Run the free branching process with the limiting laws until it holds
    ``stop_size`` individuals and report the fraction descending from ``u``.

    Only the split into descendants and non-descendants of ``u`` matters, so
    the run is on lumped counts.  Dies out: value 0 with ``extinct`` set.
    """
    u = tuple(u)
    counts = np.zeros((2, 2), dtype=np.int64)
    for v, s in initial.types().items():
        counts[0 if is_descendant(v, u) else 1, s] += 1
    return _free_branching_fraction(counts, np.array([True, False]), params, stop_size, as_rng(rng_seed))


@dataclass
class GrowthSample:
    """One replicate: fractions of each ``u`` at ``T_K^beta`` and in the limit."""

    f_K: list
    f_inf: list
    t_beta: float | None
    extinct: bool
    events: int
    inf_size: int

    @property
    def differences(self) -> list:
        return [a - b for a, b in zip(self.f_K, self.f_inf)]


def _founder_classes(founders: list, u_set: list) -> np.ndarray:
    """``member[k, f]``: founder ``f`` descends from ``u_set[k]``."""
    member = np.zeros((len(u_set), len(founders)), dtype=bool)
    for k, u in enumerate(u_set):
        for f, x in enumerate(founders):
            if is_descendant(x, u):
                member[k, f] = True
            elif is_descendant(u, x):
                raise ValueError(f"{format_label(u)} lies strictly below founder {format_label(x)}")
    return member


def growth_replicate(
    params: ModelParams,
    beta: float,
    u_set: list,
    founders: LabeledPopulation,
    rng,
    stop_size: int = 100_000,
    horizon: float = math.inf,
) -> GrowthSample:
    """Coupled run to the first time the logistic size reaches ``K - K**beta``,
    then the free side alone until ``stop_size``."""
    roots = sorted(founders.labels())
    member = _founder_classes(roots, [tuple(u) for u in u_set])
    types = founders.types()
    eng = _Engine(params, types, types, rng, lump=True, classes=roots)
    target = beta_threshold(params.K, beta)
    extinct = False
    while len(eng.kp) < target:
        if not eng.kp:
            extinct = True
            break
        if not eng.step(horizon):
            break
    reached = len(eng.kp) >= target
    eng.advance_pool(eng.t)
    # logistic-side fractions
    nK = len(eng.kp)
    fk_counts = np.zeros(len(roots), dtype=np.int64)
    for x in eng.kp:
        fk_counts[eng._class_of(x)] += 1
    f_K = [float(fk_counts[member[k]].sum() / nK) if nK else 0.0 for k in range(len(u_set))]
    # free side: labelled part plus the lumped pool, by founder and type
    counts = eng.pool[: len(roots)].copy()
    for x, s in eng.inf.items():
        counts[eng._class_of(x), s] += 1
    p_i, p_r = _kernel_law(params.family.limit_plus)
    m_i, m_r = _kernel_law(params.family.limit_minus)
    if counts.sum() < stop_size:
        kernels.branching_classes(rng, counts, p_i, p_r, m_i, m_r, int(stop_size), math.inf)
    size = int(counts.sum())
    per_root = counts.sum(axis=1)
    f_inf = [float(per_root[member[k]].sum() / size) if size else 0.0 for k in range(len(u_set))]
    return GrowthSample(f_K, f_inf, eng.t if reached else None, extinct or size == 0, eng.events, size)


def growth_experiment(
    params: ModelParams,
    beta: float,
    u_set: list,
    replicates: int,
    rng_seed: int = 0,
    founders: LabeledPopulation | None = None,
    stop_size: int = 100_000,
    index_range: tuple[int, int] | None = None,
) -> list[GrowthSample]:
    """Per-replicate pairs ``(F_K^u(T_K^beta), F_inf^u estimate)``.

    Default founders are ``(1)`` of type ``+`` and ``(2)`` of type ``-``.
    """
    founders = founders or LabeledPopulation(frozenset({(1,)}), frozenset({(2,)}))
    lo, hi = index_range or (0, replicates)
    return [
        growth_replicate(params, beta, u_set, founders, replicate_rng(rng_seed, r, STREAM_GENEALOGY, params.K),
                         stop_size)
        for r in range(lo, hi)
    ]
