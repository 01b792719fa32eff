import json
import math
from fractions import Fraction as F

import pytest
from hypothesis import given
from hypothesis import strategies as st

from logbranch.measures import (
    FamilyError,
    ModelParams,
    OrderingViolation,
    ReproductionLaw,
    build_coupling,
    central_moment,
    check_orderings,
    coupling_selective_mass,
    equalize_mass,
    family_from_json,
    family_to_json,
    load_family,
    mean_rate,
    moran_family,
    poisson_family,
    quantile_coupling,
    raw_moment,
    table_family,
)


def test_law_validation():
    with pytest.raises(ValueError):
        ReproductionLaw({-1: 1})
    with pytest.raises(ValueError):
        ReproductionLaw({2: -1})
    with pytest.raises(ValueError):
        ReproductionLaw({})
    law = ReproductionLaw({0: "1/2", 2: F(1, 2)})
    assert law.exact and law.total_mass == 1
    assert not ReproductionLaw({2: 0.5}).exact


def test_mean_rate_examples():
    assert mean_rate(ReproductionLaw({2: 1})) == 1
    fam = moran_family(1)
    assert mean_rate(fam.plus(10)) == F(11, 10)
    assert mean_rate(ReproductionLaw({0: F(1, 2), 2: F(1, 2)})) == 0


def test_central_moment_examples():
    assert central_moment(ReproductionLaw({2: 1}), 2) == 1
    assert central_moment(ReproductionLaw({0: 1}), 2) == 1
    assert central_moment(ReproductionLaw({0: F(1, 2), 3: F(1, 2)}), 3) == F(7, 2)
    assert raw_moment(ReproductionLaw({3: 2}), 2) == 18


laws = st.dictionaries(st.integers(0, 8), st.fractions(min_value=0, max_value=5, max_denominator=50),
                       min_size=1).filter(lambda d: any(v > 0 for v in d.values()))


@given(laws, st.integers(1, 4))
def test_moments_match_direct_sum(masses, order):
    law = ReproductionLaw(masses)
    direct = sum((i - 1) ** order * m for i, m in masses.items())
    assert central_moment(law, order) == direct
    fl = law.to_float()
    assert math.isclose(float(central_moment(fl, order)), float(direct), rel_tol=1e-12, abs_tol=1e-12)


def test_orderings_examples():
    K, s = 10, 1
    minus = ReproductionLaw({1: F(s, K), 2: 1})
    plus = ReproductionLaw({2: 1 + F(s, K)})
    assert check_orderings(minus, plus).ok
    assert check_orderings(ReproductionLaw({2: 1}), ReproductionLaw({2: 1})).ok
    rep = check_orderings(ReproductionLaw({3: 1}), ReproductionLaw({2: 1}))
    assert not rep.tail_ok and rep.first_tail_violation == 3
    rep = check_orderings(ReproductionLaw({0: F(1, 5), 2: 1}), ReproductionLaw({0: F(1, 2), 2: 1}))
    assert not rep.death_ok


def test_equalize_mass_examples():
    m, p = equalize_mass(ReproductionLaw({2: 1}), ReproductionLaw({2: F(11, 10)}))
    assert m.masses == {1: F(1, 10), 2: 1} and p.masses == {2: F(11, 10)}
    a, b = ReproductionLaw({2: 1}), ReproductionLaw({2: 1})
    assert equalize_mass(a, b) == (a, b)
    m, p = equalize_mass(ReproductionLaw({1: F(3, 10), 2: 1}), ReproductionLaw({2: 1}))
    assert p.masses == {1: F(3, 10), 2: 1}


def test_coupling_moran_example():
    nu = build_coupling(ModelParams(10, moran_family(1)))
    assert dict(nu.masses) == {(2, 0): 1, (1, 1): F(1, 10)}
    assert coupling_selective_mass(nu) == F(1, 10)


def test_coupling_identical_laws_diagonal():
    law = {0: F(1, 3), 1: F(1, 4), 3: F(2, 3)}
    fam = table_family(law, law)
    nu = build_coupling(ModelParams(7, fam))
    assert all(j == 0 for _, j, _ in nu.atoms)
    assert nu[(3, 0)] == F(2, 3) and nu[(0, 0)] == F(1, 3)
    assert coupling_selective_mass(nu) == 0


def test_death_atoms():
    base = {0: F(1, 5), 2: F(6, 5)}
    fam = table_family(base, base, {}, {0: F(3, 10)})
    nu = build_coupling(ModelParams(1, fam))
    assert nu[(0, 0)] == F(1, 5) and nu[(0, 1)] == F(3, 10)


def test_coupling_rejects_unordered():
    base = {2: F(1, 2), 3: F(1, 3)}
    fam = table_family(base, base, {2: -F(1, 10)}, {3: F(1, 20)})
    with pytest.raises(OrderingViolation):
        build_coupling(ModelParams(5, fam))


def test_quantile_coupling_needs_equal_mass():
    with pytest.raises(ValueError):
        quantile_coupling(ReproductionLaw({2: 1}), ReproductionLaw({2: 2}))


@st.composite
def ordered_pair(draw):
    """A minus law and a plus law obtained by moving mass upwards."""
    minus = draw(st.dictionaries(st.integers(0, 6), st.fractions(min_value=F(1, 20), max_value=3, max_denominator=20),
                                 min_size=1))
    plus = dict(minus)
    for _ in range(draw(st.integers(0, 3))):
        src = draw(st.sampled_from(sorted(plus)))
        shift = draw(st.integers(1, 3))
        frac = draw(st.fractions(min_value=0, max_value=1, max_denominator=10))
        moved = plus[src] * frac
        plus[src] -= moved
        plus[src + shift] = plus.get(src + shift, 0) + moved
    extra = draw(st.fractions(min_value=0, max_value=1, max_denominator=10))
    plus[draw(st.integers(1, 6))] = plus.get(1, 0) + extra
    minus = {k: v for k, v in minus.items() if v > 0}
    plus = {k: v for k, v in plus.items() if v > 0}
    return ReproductionLaw(minus, allow_empty=True), ReproductionLaw(plus, allow_empty=True)


def _params_for(minus, plus):
    fam = table_family(plus.masses or {2: 1}, minus.masses or {2: 1})
    return ModelParams(3, fam)


@given(ordered_pair())
def test_coupling_marginals_exact(pair):
    minus, plus = pair
    rep = check_orderings(minus, plus)
    if not rep.ok or not minus.masses or not plus.masses:
        return
    nh_minus, nh_plus = equalize_mass(minus, plus)
    masses = quantile_coupling(nh_minus, nh_plus)
    by_i, by_sum = {}, {}
    for (i, j), w in masses.items():
        assert j >= 0
        by_i[i] = by_i.get(i, 0) + w
        by_sum[i + j] = by_sum.get(i + j, 0) + w
    assert by_i == nh_minus.masses
    assert by_sum == nh_plus.masses
    # comonotone support: i + j nondecreasing in i
    keys = sorted(masses)
    sums = [i + j for i, j in keys]
    assert sums == sorted(sums)


def test_variance_identity_moran():
    for K in (10, 100, 1000):
        params = ModelParams(K, moran_family(1))
        nu = build_coupling(params)
        lhs = nu.moment(lambda i, j: i * (i - 1))
        minus = params.minus_law
        assert lhs == central_moment(minus, 2) + mean_rate(minus)


def test_higher_moments_vanish_along_K():
    fam = poisson_family(1.0, 1.0, 0.0, imax=20)
    jj, ij = [], []
    for K in (100, 1000, 10000):
        nu = build_coupling(ModelParams(K, fam))
        jj.append(nu.moment(lambda i, j: j * j))
        ij.append(nu.moment(lambda i, j: i * j))
    assert jj[0] > jj[1] > jj[2] and ij[0] > ij[1] > ij[2]


def test_family_checks():
    assert moran_family(1).check([10, 100, 1000]).ok
    assert poisson_family(1.0, 1.0, 0.0).check([100, 1000]).ok
    fam = poisson_family(2.0, 1.5, 0.5)
    assert math.isclose(float(mean_rate(fam.plus(100))), 2.0 + 0.015, rel_tol=1e-12)


def test_family_json_roundtrip(tmp_path):
    for fam in (moran_family(F(1, 2)), poisson_family(1.0, 1.0, 0.0, 15),
                table_family({0: F(1, 5), 2: F(6, 5)}, {0: F(1, 5), 2: F(6, 5)}, {}, {0: F(3, 10)})):
        doc = json.loads(json.dumps(family_to_json(fam)))
        back = family_from_json(doc)
        assert back.plus(50) == fam.plus(50) and back.minus(50) == fam.minus(50)
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"family": "moran", "s": 2, "K": 300}))
    fam, extras = load_family(path)
    assert extras == {"K": 300} and fam.s_plus == 2
    with pytest.raises(FamilyError):
        family_from_json({"family": "nope"})


def test_table_family_needs_equal_limits():
    with pytest.raises(FamilyError):
        table_family({2: 1}, {3: 1})
