"""Quartic root configuration, Vieta residuals and the 1-D criticality indicator."""

from __future__ import annotations

import cmath
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
import scipy.linalg

from kp2lab.crit_lengths import CriticalParams, critical_length, exact_product
from kp2lab.errors import InvalidRange, ResolutionError
from kp2lab.surd import Surd


@dataclass(frozen=True)
class VietaResiduals:
    """Exact residuals of the four Girard-Newton relations, in Q(sqrt(P))."""

    r1: Surd
    r2: Surd
    r3: Surd
    r4: Surd

    def as_tuple(self):
        return (self.r1, self.r2, self.r3, self.r4)

    def floats(self) -> tuple[float, float, float, float]:
        return tuple(float(r) for r in self.as_tuple())


@dataclass(frozen=True)
class QuarticSpectrum:
    params: CriticalParams | None
    gaps: tuple[int, int, int]
    n: int
    L: float
    kappa: tuple[float, float, float, float]
    sigma: float
    vieta_residuals: VietaResiduals | None


@dataclass(frozen=True)
class EntireWitness:
    alpha1: complex
    alpha2: complex
    max_abs_R1_at_roots: float
    phase_spread: float


def root_offsets(m1: int, m2: int, m3: int) -> tuple[Fraction, ...]:
    """Roots in units of 2*pi/L, shifted so that they sum to zero."""
    cumulative = (0, m1, m1 + m2, m1 + m2 + m3)
    shift = Fraction(3 * m1 + 2 * m2 + m3, 4)
    return tuple(Fraction(c) - shift for c in cumulative)


def elementary_symmetric(values: Sequence) -> list:
    """e_1..e_k of ``values`` via expansion of prod(1 + v t)."""
    coeffs = [1]
    for v in values:
        nxt = coeffs + [0]
        for j in range(len(coeffs), 0, -1):
            nxt[j] = nxt[j] + coeffs[j - 1] * v
        coeffs = nxt
    return coeffs[1:]


def sigma_value(n: int, m1: int, m2: int, m3: int, L: float) -> float:
    """sigma = e3(kappa) = (pi/L)^3 (m1+2m2+m3)(m3^2-m1^2)."""
    return (math.pi / L) ** 3 * (m1 + 2 * m2 + m3) * (m3 * m3 - m1 * m1)


def sigma_printed(n: int, m1: int, m2: int, m3: int, L: float) -> float:
    """The closed form carrying an extra factor 2; kept for side-by-side reports."""
    return 2.0 * sigma_value(n, m1, m2, m3, L)


def vieta_residuals_exact(params: CriticalParams) -> VietaResiduals:
    """Exact Girard-Newton residuals.

    With ``L = pi sqrt(P) / (4n)`` every relation is free of pi:
    ``2pi/L = 8n/sqrt(P)``, ``pi/L = 4n/sqrt(P)`` and ``(n pi/L)^2 = 16 n^4 / P``.
    """
    p = exact_product(params)
    n = params.n
    m1, m2, m3 = params.gaps
    step = Surd.root_multiple(Fraction(8 * n, p), p)           # 2 pi / L
    pi_over_L = Surd.root_multiple(Fraction(4 * n, p), p)
    kappas = [step * d for d in root_offsets(m1, m2, m3)]
    e1, e2, e3, e4 = elementary_symmetric(kappas)
    sigma = pi_over_L * pi_over_L * pi_over_L * ((m1 + 2 * m2 + m3) * (m3 * m3 - m1 * m1))
    mode_sq = Fraction(16 * n ** 4, p)
    return VietaResiduals(r1=e1, r2=e2 + 1, r3=e3 - sigma, r4=e4 + mode_sq)


def build_spectrum(params: CriticalParams) -> QuarticSpectrum:
    L = critical_length(params)
    spec = build_spectrum_raw(params.gaps, L, params.n)
    return QuarticSpectrum(params, spec.gaps, spec.n, L, spec.kappa, spec.sigma,
                           vieta_residuals_exact(params))


def build_spectrum_raw(gaps: tuple[int, int, int], L: float, n: int = 1) -> QuarticSpectrum:
    """Root configuration for arbitrary gaps and length; no R-membership check."""
    m1, m2, m3 = gaps
    k0 = -math.pi * (3 * m1 + 2 * m2 + m3) / (2.0 * L)
    h = 2.0 * math.pi / L
    kappa = (k0, k0 + m1 * h, k0 + (m1 + m2) * h, k0 + (m1 + m2 + m3) * h)
    return QuarticSpectrum(None, (m1, m2, m3), n, L, kappa,
                           sigma_value(n, m1, m2, m3, L), None)


def vieta_residuals(spec: QuarticSpectrum) -> VietaResiduals:
    if spec.vieta_residuals is not None:
        return spec.vieta_residuals
    return vieta_residuals_exact(CriticalParams(spec.n, *spec.gaps))


def entire_witness(spec: QuarticSpectrum) -> EntireWitness:
    L = spec.L
    alpha2 = 1.0 + 0j
    alpha1 = cmath.exp(-1j * L * spec.kappa[0])
    phases = [cmath.exp(-1j * L * k) for k in spec.kappa]
    spread = max(abs(ph - phases[0]) for ph in phases)
    r1 = [abs(1j * k * (alpha1 - alpha2 * ph)) for k, ph in zip(spec.kappa, phases)]
    return EntireWitness(alpha1, alpha2, max(r1), spread)


def spectrum_report(params: CriticalParams) -> dict:
    """JSON-ready summary: roots, sigma, exact and float residuals, witness."""
    spec = build_spectrum(params)
    res = spec.vieta_residuals
    wit = entire_witness(spec)
    m1, m2, m3 = params.gaps
    return {
        "params": {"n": params.n, "m1": m1, "m2": m2, "m3": m3},
        "P": exact_product(params),
        "L": spec.L,
        "kappa": list(spec.kappa),
        "sigma": spec.sigma,
        "sigma_printed_form": sigma_printed(params.n, m1, m2, m3, spec.L),
        "residuals_exact": {f"r{i}": str(r) for i, r in enumerate(res.as_tuple(), 1)},
        "residuals": {f"r{i}": float(r) for i, r in enumerate(res.as_tuple(), 1)},
        "witness": {"alpha1": [wit.alpha1.real, wit.alpha1.imag],
                    "alpha2": [wit.alpha2.real, wit.alpha2.imag],
                    "max_abs_R1_at_roots": wit.max_abs_R1_at_roots,
                    "phase_spread": wit.phase_spread},
        "case2_excluded": case2_excluded(params.n, spec.L),
    }


def case2_excluded(n: int, L: float) -> bool:
    """Certify that Q(k) cannot be a product of two double roots.

    Matching ``(k-a)^2 (k-b)^2`` against ``k^4 - k^2 - sigma k - (n pi/L)^2``:
    the cubic coefficient forces ``b = -a``; the quadratic one then reads
    ``a^2 + 4ab + b^2 = -2 a^2 = -1``, so ``a^2 = 1/2`` and the constant term
    ``a^2 b^2 = 1/4`` would have to equal ``-(n pi/L)^2 <= 0``.
    """
    if n < 1 or not L > 0:
        raise ValueError("need n >= 1 and L > 0")
    a_sq = Fraction(1, 2)            # from -2 a^2 = -1
    const_term = a_sq * a_sq         # a^2 b^2 with b = -a
    rhs = -(n * math.pi / L) ** 2
    return const_term > 0 and not rhs > 0 and float(const_term) != rhs


# ---------------------------------------------------------------------------
# 1-D reduced eigenproblem


@dataclass(frozen=True)
class SpectralODEConfig:
    xi: float
    L: float
    N: int

    def __post_init__(self):
        if self.N < 16:
            raise ResolutionError(f"N must be >= 16, got {self.N}")
        if not self.L > 0:
            raise ValueError("L must be positive")


def fd_weights(offsets: Sequence[float], order: int) -> np.ndarray:
    """Finite-difference weights at 0 for the given node offsets (unit spacing)."""
    offs = np.asarray(offsets, dtype=float)
    m = len(offs)
    vander = np.vander(offs, m, increasing=True).T
    rhs = np.zeros(m)
    rhs[order] = math.factorial(order)
    return np.linalg.solve(vander, rhs)


def _stencil(i: int, last: int) -> np.ndarray:
    if i - 3 >= 0 and i + 3 <= last:
        return np.arange(i - 3, i + 4)
    if i - 3 < 0:
        return np.arange(0, 6)
    return np.arange(last - 5, last + 1)


def _diff_row(i: int, last: int, h: float, order: int) -> tuple[np.ndarray, np.ndarray]:
    nodes = _stencil(i, last)
    return nodes, fd_weights(nodes - i, order) / h ** order


def ode_matrices(cfg: SpectralODEConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pencil (A, B) for ``lambda p = -(p' + p''' + xi d_x^{-1} p)`` plus the p'(L) row.

    Unknowns are nodal values on ``N + 2`` nodes including both ends. Rows at
    nodes 0, 1 and N+1 carry p(0) = 0, p'(0) = 0 and p(L) = 0 respectively.
    """
    N, L = cfg.N, cfg.L
    h = L / (N + 1)
    last = N + 1
    size = N + 2
    A = np.zeros((size, size))
    B = np.zeros((size, size))
    # right-anchored trapezoid antiderivative on nodes 0..N+1
    anti = np.zeros((size, size))
    for i in range(size):
        if i < last:
            anti[i, i] = -h / 2
            anti[i, i + 1:last] = -h
            anti[i, last] = -h / 2
    for i in range(2, last):
        for order, scale in ((1, 1.0), (3, 1.0)):
            nodes, w = _diff_row(i, last, h, order)
            A[i, nodes] -= scale * w
        A[i] -= cfg.xi * anti[i]
        B[i, i] = 1.0
    A[0, 0] = 1.0
    A[last, last] = 1.0
    nodes, w = _diff_row(0, last, h, 1)
    A[1, nodes] = w
    dl = np.zeros(size)
    nodes, w = _diff_row(last, last, h, 1)
    dl[nodes] = w
    return A, B, dl


def criticality_indicator(cfg: SpectralODEConfig, resolved_fraction: float = 0.25) -> float:
    """Smallest normalized ``|p'(L)|`` over resolved eigenpairs of the 3-condition problem.

    A value near zero means some eigenfunction also meets p'(L) = 0, i.e. the
    over-determined four-condition problem is (nearly) solvable. Only modes
    with ``|lambda| <= (resolved_fraction * pi / h)**3`` are considered.
    """
    A, B, dl = ode_matrices(cfg)
    vals, vecs = scipy.linalg.eig(A, B)
    h = cfg.L / (cfg.N + 1)
    cut = (resolved_fraction * math.pi / h) ** 3
    best = math.inf
    for lam, v in zip(vals, vecs.T):
        if not np.isfinite(lam) or abs(lam) > cut:
            continue
        rms = math.sqrt(float(np.mean(np.abs(v) ** 2)))
        if rms == 0.0:
            continue
        best = min(best, float(abs(dl @ v)) * cfg.L / rms)
    if not math.isfinite(best):
        raise ResolutionError("no resolved eigenpairs; increase N")
    return best


def criticality_scan(xi: float, l_min: float, l_max: float, steps: int, N: int,
                     workers: int = 1) -> list[tuple[float, float]]:
    """Indicator on ``steps`` equispaced lengths, returned in ascending order of L."""
    if not (0 < l_min < l_max) or steps < 2:
        raise InvalidRange(f"need 0 < lmin < lmax and steps >= 2, got [{l_min}, {l_max}], {steps}")
    lengths = [float(L) for L in np.linspace(l_min, l_max, steps)]

    def task(L: float) -> float:
        return criticality_indicator(SpectralODEConfig(xi, L, N))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(task, lengths))
    else:
        values = [task(L) for L in lengths]
    return list(zip(lengths, values))
