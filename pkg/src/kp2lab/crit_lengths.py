"""Critical-length sets for the linear KP-II and KdV boundary control problems.

Every comparison is carried out on the integer pair ``(P, n)`` where the
length is ``pi * sqrt(P) / (4 n)``; floats are produced only at the very end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Optional

from kp2lab.errors import InvalidParams, InvalidRange


@dataclass(frozen=True, order=True)
class CriticalParams:
    """Integer quadruple ``(n, m1, m2, m3)`` indexing a member of R.

    Ordering is lexicographic in ``(n, m1, m2, m3)``; this is the order used
    to pick witnesses.
    """

    n: int
    m1: int
    m2: int
    m3: int

    def __post_init__(self):
        for name in ("n", "m1", "m2", "m3"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise InvalidParams(f"{name} must be an integer, got {v!r}")
        if self.n < 1:
            raise InvalidParams(f"n must be >= 1, got {self.n}")
        if min(self.m1, self.m2, self.m3) < 1:
            raise InvalidParams(f"m1, m2, m3 must be positive, got {self.gaps}")
        if not abs(self.m1 - self.m3) > 2 * self.m2:
            raise InvalidParams(
                f"|m1 - m3| > 2 m2 violated for m = {self.gaps}")

    @property
    def gaps(self) -> tuple[int, int, int]:
        return (self.m1, self.m2, self.m3)


@dataclass(frozen=True)
class KdvParams:
    k: int
    l: int

    def __post_init__(self):
        if self.k < 1 or self.l < 1:
            raise InvalidParams(f"k, l must be >= 1, got ({self.k}, {self.l})")


def product_factors(m1: int, m2: int, m3: int) -> tuple[int, int, int, int]:
    """The four integer factors whose product is P (no validation)."""
    return (3 * m1 + 2 * m2 + m3,
            m1 - 2 * m2 - m3,
            m1 + 2 * m2 - m3,
            m1 + 2 * m2 + 3 * m3)


def exact_product(params: CriticalParams) -> int:
    a, b, c, d = product_factors(*params.gaps)
    p = a * b * c * d
    if p <= 0:  # unreachable for valid params; kept as a hard guard
        raise InvalidParams(f"non-positive product {p} for {params}")
    return p


def squarefree_split(p: int) -> tuple[int, int]:
    """Return ``(s, r)`` with ``p == s*s*r`` and ``r`` squarefree."""
    if p <= 0:
        raise ValueError("p must be positive")
    s, r = 1, p
    q = 2
    while q * q <= r:
        while r % (q * q) == 0:
            r //= q * q
            s *= q
        q += 1 if q == 2 else 2
    return s, r


def _length_from_pn(p: int, n: int) -> float:
    s, r = squarefree_split(p)
    return float(Fraction(s, 4 * n)) * (math.pi * math.sqrt(r))


@dataclass(frozen=True)
class CriticalLength:
    params: CriticalParams
    product: int
    value: float = field(compare=False)

    @property
    def key(self) -> tuple[int, int]:
        return reduced_key(self.product, self.params.n)


def reduced_key(p: int, n: int) -> tuple[int, int]:
    """De-duplication key ``(P/g^2, n/g)`` for the largest g with g^2 | P, g | n."""
    s, _ = squarefree_split(p)
    g = math.gcd(s, n)
    return p // (g * g), n // g


def critical_length(params: CriticalParams) -> float:
    return _length_from_pn(exact_product(params), params.n)


def critical_length_entry(params: CriticalParams) -> CriticalLength:
    p = exact_product(params)
    return CriticalLength(params, p, _length_from_pn(p, params.n))


def kdv_critical_length(params: KdvParams) -> float:
    k, l = params.k, params.l
    return 2.0 * math.pi / math.sqrt(3.0) * math.sqrt(k * k + k * l + l * l)


def valid_triples(m_cap: int) -> Iterator[tuple[int, int, int]]:
    """All (m1, m2, m3) with entries in [1, m_cap] and |m1 - m3| > 2 m2, lex order."""
    for m1 in range(1, m_cap + 1):
        for m2 in range(1, m_cap + 1):
            for m3 in range(1, m_cap + 1):
                if abs(m1 - m3) > 2 * m2:
                    yield m1, m2, m3


def _n_window(p: int, l_min: float, l_max: float) -> range:
    # pi sqrt(P) / (4 n) in [l_min, l_max]  <=>  n in [c / l_max, c / l_min]
    c = math.pi * math.sqrt(p) / 4.0
    lo = max(1, math.floor(c / l_max) - 1)
    hi = math.ceil(c / l_min) + 1
    return range(lo, hi + 1)


def enumerate_R(l_min: float, l_max: float, m_cap: int) -> list[CriticalLength]:
    """Members of R in ``[l_min, l_max]`` with ``max(m) <= m_cap``, sorted by value.

    Entries sharing the reduced key are collapsed onto the lexicographically
    first parameter quadruple.
    """
    if not (l_min > 0 and l_max > l_min):
        raise InvalidRange(f"need 0 < l_min < l_max, got [{l_min}, {l_max}]")
    if m_cap < 3:
        raise InvalidRange(f"m_cap must be >= 3, got {m_cap}")
    best: dict[tuple[int, int], CriticalLength] = {}
    for m1, m2, m3 in valid_triples(m_cap):
        a, b, c, d = product_factors(m1, m2, m3)
        p = a * b * c * d
        s, r = squarefree_split(p)
        root = math.pi * math.sqrt(r)
        for n in _n_window(p, l_min, l_max):
            value = float(Fraction(s, 4 * n)) * root
            if not (l_min <= value <= l_max):
                continue
            g = math.gcd(s, n)
            key = (p // (g * g), n // g)
            params = CriticalParams(n, m1, m2, m3)
            held = best.get(key)
            if held is None or params < held.params:
                best[key] = CriticalLength(params, p, value)
    # ties in value are impossible across distinct keys; sort key is exact
    return sorted(best.values(), key=lambda e: (Fraction(e.key[0], e.key[1] ** 2), e.key))


@dataclass(frozen=True)
class Verdict:
    member: bool
    witness: Optional[CriticalParams] = None
    value: Optional[float] = None

    def to_dict(self) -> dict:
        if not self.member:
            return {"verdict": "no-witness-under-cap"}
        w = self.witness
        return {"verdict": "member",
                "witness": {"n": w.n, "m1": w.m1, "m2": w.m2, "m3": w.m3},
                "value": self.value}


def contains(length: float, tol: float, m_cap: int) -> Verdict:
    """Cap-bounded membership test for R with absolute tolerance ``tol``."""
    if not (length > 0 and tol > 0):
        raise InvalidRange("length and tol must be positive")
    hits = []
    for m1, m2, m3 in valid_triples(m_cap):
        p = exact_product(CriticalParams(1, m1, m2, m3))
        for n in _n_window(p, max(length - tol, 1e-300), length + tol):
            value = _length_from_pn(p, n)
            if abs(value - length) <= tol:
                hits.append((CriticalParams(n, m1, m2, m3), value))
    if not hits:
        return Verdict(False)
    params, value = min(hits)
    return Verdict(True, params, value)


def contains_exact(p: int, n: int, m_cap: int) -> Verdict:
    """Tolerance-free membership on the integer representation of a length."""
    target = Fraction(p, n * n)
    for m1, m2, m3 in valid_triples(m_cap):
        q = exact_product(CriticalParams(1, m1, m2, m3))
        # q / k^2 == p / n^2  <=>  k^2 == q n^2 / p
        k2 = Fraction(q) / target
        if k2.denominator != 1:
            continue
        k = math.isqrt(k2.numerator)
        if k >= 1 and k * k == k2.numerator:
            params = CriticalParams(k, m1, m2, m3)
            return Verdict(True, params, _length_from_pn(q, k))
    return Verdict(False)


@dataclass(frozen=True)
class RStarCheck:
    value: float
    product: int
    identity_holds: bool


def rstar(k: int, n: int) -> RStarCheck:
    """Member ``24 k^2 pi / n`` of R* and the exact check that it lies in R."""
    if k < 1 or n < 1:
        raise InvalidParams("k, n must be >= 1")
    params = CriticalParams(n, k, k, 7 * k)
    p = exact_product(params)
    root = math.isqrt(p)
    # sqrt(P) = 96 k^2 and pi*96k^2/(4n) == 24 k^2 pi / n
    holds = p == 9216 * k ** 4 and root * root == p and root == 96 * k * k
    value = float(Fraction(24 * k * k, n)) * math.pi
    return RStarCheck(value, p, holds)
