"""Exact arithmetic in the quadratic extension Q(sqrt(D))."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction


@dataclass(frozen=True)
class Surd:
    """The number ``a + b*sqrt(radicand)`` with rational ``a``, ``b``."""

    a: Fraction
    b: Fraction
    radicand: int

    @classmethod
    def rational(cls, q, radicand: int) -> "Surd":
        return cls(Fraction(q), Fraction(0), radicand)

    @classmethod
    def root_multiple(cls, q, radicand: int) -> "Surd":
        return cls(Fraction(0), Fraction(q), radicand)

    def _coerce(self, other) -> "Surd":
        if isinstance(other, Surd):
            if other.radicand != self.radicand:
                raise ValueError("mixed radicands")
            return other
        return Surd(Fraction(other), Fraction(0), self.radicand)

    def __add__(self, other):
        o = self._coerce(other)
        return Surd(self.a + o.a, self.b + o.b, self.radicand)

    __radd__ = __add__

    def __neg__(self):
        return Surd(-self.a, -self.b, self.radicand)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        o = self._coerce(other)
        d = self.radicand
        return Surd(self.a * o.a + d * self.b * o.b,
                    self.a * o.b + self.b * o.a, d)

    __rmul__ = __mul__

    def is_zero(self) -> bool:
        return self.a == 0 and self.b == 0

    def __float__(self) -> float:
        # b*sqrt(D) evaluated as sqrt(b^2 D) keeps one rounding in the root
        from math import sqrt
        root = sqrt(float(self.b * self.b * self.radicand))
        return float(self.a) + (root if self.b >= 0 else -root)

    def __str__(self) -> str:
        if self.b == 0:
            return str(self.a)
        tail = f"{self.b}*sqrt({self.radicand})"
        if self.a == 0:
            return tail
        return f"{self.a} + {tail}"
