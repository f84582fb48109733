"""Feedback runs, empirical decay rates and the explicit Lyapunov certificate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from kp2lab.errors import ConfigurationError, FitDomainError, HypothesisViolation
from kp2lab.pde_core import Field, Grid, SimConfig, Trajectory, simulate

SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class LyapunovCertificate:
    L: float
    alpha: float
    gamma: float
    nu: float
    rho: float
    safety: float

    def bound(self, t: np.ndarray | float, E0: float) -> np.ndarray | float:
        return self.rho * E0 * np.exp(-self.nu * np.asarray(t))

    def to_dict(self) -> dict:
        return {"L": self.L, "alpha": self.alpha, "gamma": self.gamma,
                "nu": self.nu, "rho": self.rho, "safety": self.safety}


def lyapunov_params(L: float, alpha: float, safety: float = 0.9) -> LyapunovCertificate:
    """Certified ``(gamma, nu, rho)`` with ``E(t) <= rho E(0) exp(-nu t)``.

    ``gamma`` sits at ``safety`` times its supremum ``(1-alpha^2)/(L alpha^2)``
    and ``nu`` at ``safety`` times its supremum for that ``gamma``.
    """
    if not 0 < L < SQRT3:
        raise HypothesisViolation(f"need 0 < L < sqrt(3), got L = {L}")
    if not 0 < abs(alpha) <= 1:
        raise HypothesisViolation(f"need 0 < |alpha| <= 1, got alpha = {alpha}")
    if abs(alpha) == 1:
        raise HypothesisViolation("|alpha| = 1 leaves no admissible gamma (1 - alpha^2 = 0)")
    if not 0 < safety < 1:
        raise HypothesisViolation(f"safety must lie in (0, 1), got {safety}")
    a2 = alpha * alpha
    gamma = safety * (1.0 - a2) / (L * a2)
    rho = 1.0 + L * gamma
    nu = safety * gamma * (3.0 - L * L) / (rho * L * L)
    return LyapunovCertificate(L, alpha, gamma, nu, rho, safety)


def feedback_simulate(u0: Field, alpha: float, T: float, dt: float,
                      drift: bool = True) -> Trajectory:
    return simulate(u0, SimConfig(T, dt, drift, "feedback", alpha))


@dataclass(frozen=True)
class DecayFit:
    mu: float
    amplitude: float
    rms_log_residual: float
    samples: int


def fit_decay(times: Sequence[float], energy: Sequence[float],
              window: Optional[tuple[float, float]] = None) -> DecayFit:
    """Least squares on ``log E = log a - mu t`` over the window."""
    t = np.asarray(times, dtype=float)
    E = np.asarray(energy, dtype=float)
    if t.shape != E.shape:
        raise ConfigurationError("times and energy differ in length")
    if window is not None:
        sel = (t >= window[0]) & (t <= window[1])
        t, E = t[sel], E[sel]
    if np.any(E <= 0):
        raise FitDomainError("non-positive energy samples in the fit window")
    if t.size < 10:
        raise FitDomainError(f"need at least 10 samples in the window, got {t.size}")
    design = np.column_stack((np.ones_like(t), -t))
    coef, *_ = np.linalg.lstsq(design, np.log(E), rcond=None)
    resid = np.log(E) - design @ coef
    return DecayFit(float(coef[1]), float(math.exp(coef[0])),
                    float(np.sqrt(np.mean(resid * resid))), int(t.size))


@dataclass(frozen=True)
class BoundCheck:
    holds: bool
    max_ratio: float
    worst_time: float


def check_decay_bound(traj: Trajectory, cert: LyapunovCertificate,
                      rtol: float = 1e-12) -> BoundCheck:
    """``E(t_k) <= rho E(0) exp(-nu t_k)`` at every sample; ``max_ratio`` is the worst ``E/bound``."""
    cfg = traj.cfg
    if cfg.bc_mode != "feedback" or cfg.alpha != cert.alpha or traj.grid.L != cert.L:
        raise ConfigurationError(
            f"trajectory (mode={cfg.bc_mode}, L={traj.grid.L}, alpha={cfg.alpha}) does not "
            f"match certificate (L={cert.L}, alpha={cert.alpha})")
    E = traj.energy
    if E[0] == 0.0:
        return BoundCheck(bool(np.all(E == 0.0)), 0.0, 0.0)
    ratio = E / cert.bound(traj.times, E[0])
    k = int(np.argmax(ratio))
    return BoundCheck(bool(ratio[k] <= 1.0 + rtol), float(ratio[k]), float(traj.times[k]))


def default_grid(L: float, Nx: int = 64, Ny: int = 32) -> Grid:
    return Grid(L, Nx, Ny)
