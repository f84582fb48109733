import math
from fractions import Fraction

import mpmath
import pytest
from hypothesis import given, settings, strategies as st

from kp2lab.crit_lengths import (CriticalParams, KdvParams, contains, contains_exact,
                                 critical_length, critical_length_entry, enumerate_R,
                                 exact_product, kdv_critical_length, reduced_key, rstar,
                                 squarefree_split, valid_triples)
from kp2lab.errors import InvalidParams, InvalidRange


def mp_length(p, n):
    mpmath.mp.dps = 50
    return mpmath.pi * mpmath.sqrt(p) / (4 * n)


def ulps(a, b):
    return abs(a - b) / math.ulp(b)


@pytest.mark.parametrize("params,P,exact", [
    ((15, 1, 1, 4), 675, math.sqrt(3) * math.pi / 4),
    ((12, 1, 1, 7), 9216, 2 * math.pi),
    ((3, 7, 1, 1), 9216, 8 * math.pi),
])
def test_reference_lengths(params, P, exact):
    cp = CriticalParams(*params)
    assert exact_product(cp) == P
    L = critical_length(cp)
    assert ulps(L, float(mp_length(P, params[0]))) <= 1
    assert L == pytest.approx(exact, rel=4e-16)


def test_valid_triples_condition():
    triples = list(valid_triples(5))
    assert triples == sorted(triples)
    assert all(abs(a - c) > 2 * b for a, b, c in triples)
    assert (1, 1, 4) in triples and (1, 1, 3) not in triples


def test_product_is_symmetric_in_outer_gaps():
    for m1, m2, m3 in valid_triples(6):
        assert exact_product(CriticalParams(1, m1, m2, m3)) == exact_product(CriticalParams(1, m3, m2, m1))


@pytest.mark.parametrize("bad", [(0, 1, 1, 1), (1, 0, 1, 1), (1, 1, -2, 1)])
def test_invalid_params(bad):
    with pytest.raises(InvalidParams):
        CriticalParams(*bad)


def test_squarefree_split():
    assert squarefree_split(675) == (15, 3)
    assert squarefree_split(9216) == (96, 1)
    assert squarefree_split(1) == (1, 1)


def test_reduced_key_merges_equal_lengths():
    a = critical_length_entry(CriticalParams(12, 1, 1, 7))
    b = critical_length_entry(CriticalParams(3, 7, 1, 1))
    assert a.key != b.key
    assert reduced_key(9216 * 4, 24) == reduced_key(9216, 12)


def test_enumerate_sorted_unique_in_range():
    entries = enumerate_R(0.5, 20.0, 8)
    values = [e.value for e in entries]
    assert values == sorted(values)
    assert all(0.5 <= v <= 20.0 for v in values)
    keys = [e.key for e in entries]
    assert len(keys) == len(set(keys))
    for e in entries:
        assert e.product == exact_product(e.params)
        assert e.value == critical_length(e.params)


def test_enumerate_contains_two_pi():
    entries = enumerate_R(6.0, 6.5, 8)
    assert any(e.value == critical_length(CriticalParams(12, 1, 1, 7)) for e in entries)


def test_enumerate_rejects_bad_range():
    with pytest.raises(InvalidRange):
        enumerate_R(2.0, 1.0, 5)
    with pytest.raises(InvalidRange):
        enumerate_R(0.0, 1.0, 5)


def test_contains_two_pi():
    v = contains(2 * math.pi, 1e-9, 8)
    assert v.member
    assert v.value == pytest.approx(2 * math.pi, abs=1e-12)
    assert critical_length(v.witness) == pytest.approx(2 * math.pi, abs=1e-12)


def test_contains_reports_no_witness_under_cap():
    v = contains(1.0, 1e-12, 4)
    assert not v.member
    assert v.to_dict() == {"verdict": "no-witness-under-cap"}


def test_contains_exact_matches_integer_representation():
    assert contains_exact(675, 15, 4).member
    assert contains_exact(9216, 12, 7).member
    assert not contains_exact(2, 1, 6).member


TRIPLES = st.sampled_from(list(valid_triples(7)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), TRIPLES)
def test_length_formula_against_high_precision(n, m):
    cp = CriticalParams(n, *m)
    P = exact_product(cp)
    assert ulps(critical_length(cp), float(mp_length(P, n))) <= 1


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40))
def test_rstar_identity(k, n):
    r = rstar(k, n)
    assert r.identity_holds
    assert r.product == 9216 * k ** 4
    assert r.value == pytest.approx(24 * k * k * math.pi / n, rel=4e-16)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), TRIPLES)
def test_members_are_found_exactly(n, m):
    P = exact_product(CriticalParams(n, *m))
    v = contains_exact(P, n, max(m))
    assert v.member
    assert exact_product(v.witness) * n * n == P * v.witness.n ** 2


def test_kdv_lengths():
    # 2 pi sqrt((k^2 + kl + l^2) / 3)
    assert kdv_critical_length(KdvParams(1, 1)) == pytest.approx(2 * math.pi, rel=1e-15)
    assert kdv_critical_length(KdvParams(1, 2)) == pytest.approx(2 * math.pi * math.sqrt(7 / 3), rel=1e-15)
