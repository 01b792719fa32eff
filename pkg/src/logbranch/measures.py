"""Offspring laws, law families, model parameters and the coupled event measure.

Masses are kept as :class:`fractions.Fraction` whenever every input mass is
rational (ints, Fractions, or ``"p/q"`` strings) so that marginal identities of
the coupling can be asserted exactly; any float input switches a law to float.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Union

Mass = Union[Fraction, float]

__all__ = [
    "CouplingMeasure",
    "FamilyError",
    "LawFamily",
    "ModelParams",
    "OrderingReport",
    "OrderingViolation",
    "ReproductionLaw",
    "build_coupling",
    "central_moment",
    "check_orderings",
    "coupling_selective_mass",
    "equalize_mass",
    "family_from_json",
    "family_to_json",
    "load_family",
    "mean_rate",
    "moran_family",
    "poisson_family",
    "quantile_coupling",
    "raw_moment",
    "table_family",
]


class OrderingViolation(ValueError):
    """The laws are not stochastically ordered, so no ASG coupling exists."""


class FamilyError(ValueError):
    pass


def as_mass(value: Any) -> Mass:
    if isinstance(value, bool):
        raise TypeError("boolean is not a mass")
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        return value
    raise TypeError(f"unsupported mass {value!r}")


def _unify(values: Iterable[Mass]) -> bool:
    """True when every value is exact."""
    return all(isinstance(v, Fraction) for v in values)


class ReproductionLaw:
    """Finite measure on offspring counts; ``law[i]`` is the rate of ``i`` children."""

    __slots__ = ("_atoms", "_exact")

    def __init__(self, masses: Mapping[int, Any], *, allow_empty: bool = False):
        atoms = {}
        for i, raw in masses.items():
            i = int(i)
            if i < 0:
                raise ValueError(f"offspring count must be >= 0, got {i}")
            mass = as_mass(raw)
            if mass < 0:
                raise ValueError(f"negative mass {mass} at {i}")
            if mass != 0:
                atoms[i] = atoms.get(i, 0) + mass
        exact = _unify(atoms.values())
        if not exact:
            atoms = {i: float(v) for i, v in atoms.items()}
        if not allow_empty and not atoms:
            raise ValueError("law must have positive total mass")
        self._atoms = tuple(sorted(atoms.items()))
        self._exact = exact

    @property
    def atoms(self) -> tuple[tuple[int, Mass], ...]:
        return self._atoms

    @property
    def masses(self) -> dict[int, Mass]:
        return dict(self._atoms)

    @property
    def exact(self) -> bool:
        return self._exact

    @property
    def support(self) -> list[int]:
        return [i for i, _ in self._atoms]

    @property
    def total_mass(self) -> Mass:
        return sum((m for _, m in self._atoms), Fraction(0) if self._exact else 0.0)

    def __getitem__(self, i: int) -> Mass:
        for k, m in self._atoms:
            if k == i:
                return m
        return Fraction(0) if self._exact else 0.0

    def tail(self, i: int) -> Mass:
        """Mass of ``[i, inf)``."""
        return sum((m for k, m in self._atoms if k >= i), Fraction(0) if self._exact else 0.0)

    def restrict_positive(self) -> "ReproductionLaw":
        """The reproduction part ``law(. & N)``; may be empty."""
        return ReproductionLaw({i: m for i, m in self._atoms if i >= 1}, allow_empty=True)

    def to_float(self) -> "ReproductionLaw":
        return ReproductionLaw({i: float(m) for i, m in self._atoms}, allow_empty=True)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ReproductionLaw) and self._atoms == other._atoms

    def __hash__(self) -> int:
        return hash(self._atoms)

    def __repr__(self) -> str:
        body = ", ".join(f"{i}: {m}" for i, m in self._atoms)
        return f"ReproductionLaw({{{body}}})"


def mean_rate(law: ReproductionLaw) -> Mass:
    """Net growth rate ``sum (i-1) mu(i)``."""
    return central_moment(law, 1)


def central_moment(law: ReproductionLaw, order: int, center: int = 1) -> Mass:
    """``sum (i - center)**order * mu(i)``."""
    zero = Fraction(0) if law.exact else 0.0
    return sum(((i - center) ** order * m for i, m in law.atoms), zero)


def raw_moment(law: ReproductionLaw, order: int) -> Mass:
    return central_moment(law, order, center=0)


@dataclass(frozen=True)
class OrderingReport:
    tail_ok: bool
    first_tail_violation: int | None
    death_ok: bool

    @property
    def ok(self) -> bool:
        return self.tail_ok and self.death_ok


def _le(a: Mass, b: Mass, tol: float) -> bool:
    if isinstance(a, Fraction) and isinstance(b, Fraction):
        return a <= b
    return float(a) <= float(b) + tol * max(1.0, abs(float(b)))


def check_orderings(minus: ReproductionLaw, plus: ReproductionLaw, tol: float = 1e-12) -> OrderingReport:
    """Tail ordering on ``[i, inf)`` for ``i >= 1`` and ordering of the death rates.

    ``tol`` is a relative slack used only when one of the laws is float.
    """
    first = None
    top = max(minus.support + plus.support + [1])
    for i in range(1, top + 1):
        if not _le(minus.tail(i), plus.tail(i), tol):
            first = i
            break
    return OrderingReport(first is None, first, _le(plus[0], minus[0], tol))


def equalize_mass(
    minus: ReproductionLaw, plus: ReproductionLaw
) -> tuple[ReproductionLaw, ReproductionLaw]:
    """Pad the lighter of the two reproduction measures with mass at one offspring.

    A single child replaces its parent, so the dynamics, the mean rate and the
    tail ordering on ``i >= 2`` are unchanged.
    """
    minus = minus.restrict_positive()
    plus = plus.restrict_positive()
    gap = plus.total_mass - minus.total_mass
    if gap == 0:
        return minus, plus
    if gap > 0:
        padded = minus.masses
        padded[1] = padded.get(1, 0) + gap
        return ReproductionLaw(padded), plus
    padded = plus.masses
    padded[1] = padded.get(1, 0) - gap
    return minus, ReproductionLaw(padded)


@dataclass(frozen=True)
class CouplingMeasure:
    """Measure on pairs ``(i, j)``: ``i`` children for a ``-`` parent, ``i + j`` for a ``+`` parent."""

    masses: Mapping[tuple[int, int], Mass]
    exact: bool = True

    @cached_property
    def atoms(self) -> list[tuple[int, int, Mass]]:
        return sorted((i, j, m) for (i, j), m in self.masses.items())

    @property
    def total_mass(self) -> Mass:
        return sum(self.masses.values(), Fraction(0) if self.exact else 0.0)

    def __getitem__(self, key: tuple[int, int]) -> Mass:
        return self.masses.get(key, Fraction(0) if self.exact else 0.0)

    def marginal_minus(self) -> dict[int, Mass]:
        """Law of ``i`` on ``i >= 1``."""
        out: dict[int, Mass] = {}
        for i, _, m in self.atoms:
            if i >= 1:
                out[i] = out.get(i, 0) + m
        return out

    def marginal_plus(self) -> dict[int, Mass]:
        """Push-forward under ``(i, j) -> i + j`` restricted to ``i >= 1``."""
        out: dict[int, Mass] = {}
        for i, j, m in self.atoms:
            if i >= 1:
                out[i + j] = out.get(i + j, 0) + m
        return out

    def moment(self, fn: Callable[[int, int], Any]) -> Mass:
        zero = Fraction(0) if self.exact else 0.0
        return sum((fn(i, j) * m for i, j, m in self.atoms), zero)

    def arrays(self):
        """``(i, j, mass)`` as numpy arrays for the simulation kernels."""
        import numpy as np

        atoms = self.atoms
        return (
            np.array([a[0] for a in atoms], dtype=np.int64),
            np.array([a[1] for a in atoms], dtype=np.int64),
            np.array([float(a[2]) for a in atoms], dtype=np.float64),
        )


def quantile_coupling(
    nu_minus: ReproductionLaw, nu_plus: ReproductionLaw
) -> dict[tuple[int, int], Mass]:
    """Comonotone coupling of two reproduction measures with equal total mass.

    Walks both cumulative distributions together, so the ``u``-quantiles of the
    two laws are paired; returns masses keyed by ``(y_minus, y_plus - y_minus)``.
    """
    a = list(nu_minus.atoms)
    b = list(nu_plus.atoms)
    exact = nu_minus.exact and nu_plus.exact
    ta, tb = nu_minus.total_mass, nu_plus.total_mass
    if (ta != tb) if exact else not math.isclose(float(ta), float(tb), rel_tol=1e-12):
        raise ValueError("laws must carry equal mass; call equalize_mass first")
    out: dict[tuple[int, int], Mass] = {}
    ia = ib = 0
    rem_a = a[0][1] if a else 0
    rem_b = b[0][1] if b else 0
    while ia < len(a) and ib < len(b):
        take = min(rem_a, rem_b)
        y_minus, y_plus = a[ia][0], b[ib][0]
        if take > 0:
            key = (y_minus, y_plus - y_minus)
            out[key] = out.get(key, 0) + take
        rem_a -= take
        rem_b -= take
        if rem_a <= 0 or (not exact and rem_a <= 1e-15 * float(nu_minus.total_mass)):
            ia += 1
            rem_a = a[ia][1] if ia < len(a) else 0
        if rem_b <= 0 or (not exact and rem_b <= 1e-15 * float(nu_plus.total_mass)):
            ib += 1
            rem_b = b[ib][1] if ib < len(b) else 0
    return out


def build_coupling(params: "ModelParams") -> CouplingMeasure:
    """Event measure ``nu_K``: quantile coupling of the reproduction parts plus death atoms."""
    minus, plus = params.minus_law, params.plus_law
    report = check_orderings(minus, plus)
    if not report.ok:
        raise OrderingViolation(
            f"laws not ordered (tail violation at {report.first_tail_violation}, "
            f"death ordering {'ok' if report.death_ok else 'violated'})"
        )
    nh_minus, nh_plus = equalize_mass(minus.restrict_positive(), plus.restrict_positive())
    masses = quantile_coupling(nh_minus, nh_plus)
    if any(j < 0 for (_, j) in masses):
        raise OrderingViolation("quantile coupling produced a negative surplus")
    if plus[0] > 0:
        masses[(0, 0)] = masses.get((0, 0), 0) + plus[0]
    if minus[0] - plus[0] > 0:
        masses[(0, 1)] = masses.get((0, 1), 0) + (minus[0] - plus[0])
    exact = minus.exact and plus.exact
    if not exact:
        masses = {k: float(v) for k, v in masses.items()}
    return CouplingMeasure(masses, exact)


def coupling_selective_mass(nu: CouplingMeasure) -> Mass:
    """``sum j nu(i, j)``, equal to the difference of the two mean rates."""
    return nu.moment(lambda i, j: j)


# ----------------------------------------------------------------------------
# law families


@dataclass(frozen=True)
class FamilyCheck:
    mean_errors: dict[int, tuple[float, float]]
    limit_mean_ok: bool
    limit_variance_ok: bool
    c: float

    @property
    def ok(self) -> bool:
        return (
            self.limit_mean_ok
            and self.limit_variance_ok
            and all(abs(err) <= bound for err, bound in self.mean_errors.values())
        )


@dataclass(frozen=True)
class LawFamily:
    """K-indexed pair of offspring laws together with their limiting constants.

    ``m`` is the common limiting growth rate, ``s_plus``/``s_minus`` the 1/K
    corrections of the two mean rates and ``v_plus``/``v_minus`` the limiting
    second central moments.
    """

    name: str
    plus: Callable[[int], ReproductionLaw]
    minus: Callable[[int], ReproductionLaw]
    limit_plus: ReproductionLaw
    limit_minus: ReproductionLaw
    m: float
    s_plus: float
    s_minus: float
    v_plus: float
    v_minus: float
    spec: dict = field(default_factory=dict, compare=False)

    def check(self, Ks: Iterable[int], c: float = 1.0, tol: float = 1e-9) -> FamilyCheck:
        """Executable form of the mean-rate expansion with an ``o(1/K)`` budget of ``c/K**1.5``."""
        errors = {}
        for K in Ks:
            for law, s in ((self.plus(K), self.s_plus), (self.minus(K), self.s_minus)):
                err = float(mean_rate(law)) - self.m - s / K
                bound = c / K**1.5
                prev = errors.get(K)
                if prev is None or abs(err) > abs(prev[0]):
                    errors[K] = (err, bound)
        lm = all(
            math.isclose(float(mean_rate(law)), self.m, rel_tol=tol, abs_tol=tol)
            for law in (self.limit_plus, self.limit_minus)
        )
        lv = math.isclose(
            float(central_moment(self.limit_plus, 2)), self.v_plus, rel_tol=tol, abs_tol=tol
        ) and math.isclose(
            float(central_moment(self.limit_minus, 2)), self.v_minus, rel_tol=tol, abs_tol=tol
        )
        return FamilyCheck(errors, lm, lv, c)


def _corrected(base: Mapping[int, Mass], per_K: Mapping[int, Mass], K: int) -> ReproductionLaw:
    masses: dict[int, Any] = dict(base)
    for i, coef in per_K.items():
        step = coef / K if isinstance(coef, Fraction) else float(coef) / K
        masses[i] = masses.get(i, 0) + step
    return ReproductionLaw(masses)


def table_family(
    plus_atoms: Mapping[int, Any],
    minus_atoms: Mapping[int, Any],
    plus_per_K: Mapping[int, Any] | None = None,
    minus_per_K: Mapping[int, Any] | None = None,
    *,
    name: str = "table",
    spec: dict | None = None,
) -> LawFamily:
    """Laws of the form ``mu_K(i) = a_i + b_i / K`` for each type."""
    pa = {int(i): as_mass(v) for i, v in plus_atoms.items()}
    ma = {int(i): as_mass(v) for i, v in minus_atoms.items()}
    pk = {int(i): as_mass(v) for i, v in (plus_per_K or {}).items()}
    mk = {int(i): as_mass(v) for i, v in (minus_per_K or {}).items()}
    limit_plus = ReproductionLaw(pa)
    limit_minus = ReproductionLaw(ma)
    m_plus = float(mean_rate(limit_plus))
    m_minus = float(mean_rate(limit_minus))
    if not math.isclose(m_plus, m_minus, rel_tol=1e-12, abs_tol=1e-12):
        raise FamilyError(f"limiting mean rates differ: {m_plus} vs {m_minus}")
    if m_plus <= 0:
        raise FamilyError("limiting mean rate must be positive")
    s_plus = float(sum((i - 1) * v for i, v in pk.items()))
    s_minus = float(sum((i - 1) * v for i, v in mk.items()))
    return LawFamily(
        name=name,
        plus=lambda K: _corrected(pa, pk, K),
        minus=lambda K: _corrected(ma, mk, K),
        limit_plus=limit_plus,
        limit_minus=limit_minus,
        m=m_plus,
        s_plus=s_plus,
        s_minus=s_minus,
        v_plus=float(central_moment(limit_plus, 2)),
        v_minus=float(central_moment(limit_minus, 2)),
        spec=spec
        or {
            "family": "table",
            "plus": {"atoms": _atoms_json(pa), "atoms_per_K": _atoms_json(pk)},
            "minus": {"atoms": _atoms_json(ma), "atoms_per_K": _atoms_json(mk)},
        },
    )


def moran_family(s: Any = 1) -> LawFamily:
    """Binary splitting at rate one; the ``+`` type splits at rate ``1 + s/K``."""
    s = as_mass(s)
    return table_family(
        {2: 1},
        {2: 1},
        {2: s},
        {},
        name="moran",
        spec={"family": "moran", "s": _mass_json(s)},
    )


def _truncated_poisson(lam: float, imax: int) -> list[float]:
    from scipy.stats import poisson

    pmf = poisson.pmf(range(imax + 1), lam)
    return list(pmf / pmf.sum())


def _solve_lambda(target_mean: float, imax: int) -> float:
    from scipy.optimize import brentq

    def gap(lam: float) -> float:
        pmf = _truncated_poisson(lam, imax)
        return sum(i * p for i, p in enumerate(pmf)) - target_mean

    return brentq(gap, 1e-9, 10.0 * imax, xtol=1e-15, rtol=1e-15, maxiter=500)


def poisson_family(m: float = 1.0, s_plus: float = 1.0, s_minus: float = 0.0, imax: int = 30) -> LawFamily:
    """Unit-rate reproduction with truncated Poisson offspring numbers.

    The Poisson parameter of each type is solved so that the truncated mean
    offspring number is exactly ``1 + m + s/K``.
    """
    if not 0 < m < imax - 1:
        raise FamilyError("need 0 < m < imax - 1")

    def law(s: float) -> Callable[[int], ReproductionLaw]:
        def at(K: int) -> ReproductionLaw:
            lam = _solve_lambda(1.0 + m + s / K, imax)
            return ReproductionLaw(dict(enumerate(_truncated_poisson(lam, imax))))

        return at

    lam_inf = _solve_lambda(1.0 + m, imax)
    limit = ReproductionLaw(dict(enumerate(_truncated_poisson(lam_inf, imax))))
    v = float(central_moment(limit, 2))
    return LawFamily(
        name="poisson",
        plus=law(s_plus),
        minus=law(s_minus),
        limit_plus=limit,
        limit_minus=limit,
        m=float(m),
        s_plus=float(s_plus),
        s_minus=float(s_minus),
        v_plus=v,
        v_minus=v,
        spec={"family": "poisson", "m": m, "s_plus": s_plus, "s_minus": s_minus, "imax": imax},
    )


def _mass_json(m: Mass) -> Any:
    if isinstance(m, Fraction):
        return str(m) if m.denominator != 1 else m.numerator
    return m


def _atoms_json(atoms: Mapping[int, Mass]) -> list:
    return [[i, _mass_json(m)] for i, m in sorted(atoms.items())]


def _atoms_from_json(rows: Any) -> dict[int, Mass]:
    if rows is None:
        return {}
    out: dict[int, Mass] = {}
    for row in rows:
        if len(row) != 2:
            raise FamilyError(f"atom rows are [i, mass], got {row!r}")
        out[int(row[0])] = as_mass(row[1])
    return out


def family_to_json(family: LawFamily) -> dict:
    return dict(family.spec)


def family_from_json(doc: Mapping[str, Any]) -> LawFamily:
    kind = doc.get("family")
    try:
        if kind == "moran":
            return moran_family(doc.get("s", 1))
        if kind == "poisson":
            return poisson_family(
                float(doc.get("m", 1.0)),
                float(doc.get("s_plus", 1.0)),
                float(doc.get("s_minus", 0.0)),
                int(doc.get("imax", 30)),
            )
        if kind == "table":
            shared = _atoms_from_json(doc.get("atoms"))
            plus = doc.get("plus", {})
            minus = doc.get("minus", {})
            pa = _atoms_from_json(plus.get("atoms")) or shared
            ma = _atoms_from_json(minus.get("atoms")) or shared
            return table_family(
                pa,
                ma,
                _atoms_from_json(plus.get("atoms_per_K")),
                _atoms_from_json(minus.get("atoms_per_K")),
                spec=dict(doc),
            )
    except (TypeError, ValueError, KeyError) as exc:
        raise FamilyError(str(exc)) from exc
    raise FamilyError(f"unknown family {kind!r}")


def load_family(path: str | Path) -> tuple[LawFamily, dict]:
    """Read a model file; returns the family and the remaining top-level keys."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise FamilyError("model file must hold a JSON object")
    extras = {k: v for k, v in doc.items() if k in ("K", "theta_plus", "theta_minus")}
    return family_from_json(doc), extras


@dataclass(frozen=True)
class ModelParams:
    K: int
    family: LawFamily
    theta_plus: float = 0.0
    theta_minus: float = 0.0

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError("carrying capacity must be a positive integer")
        if self.theta_plus < 0 or self.theta_minus < 0:
            raise ValueError("mutation intensities must be nonnegative")

    @cached_property
    def plus_law(self) -> ReproductionLaw:
        return self.family.plus(self.K)

    @cached_property
    def minus_law(self) -> ReproductionLaw:
        return self.family.minus(self.K)

    @property
    def competition(self) -> float:
        """Per-capita, per-partner death rate ``m / K``."""
        return self.family.m / self.K

    def with_K(self, K: int) -> "ModelParams":
        return ModelParams(K, self.family, self.theta_plus, self.theta_minus)
