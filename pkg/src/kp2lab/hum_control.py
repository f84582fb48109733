"""Boundary control synthesis by the Hilbert Uniqueness Method.

The control driving ``u0`` to ``uT`` is ``h = theta_x(L)`` where ``theta``
solves the backward adjoint problem from the minimizer ``theta_T`` of
``Lambda(theta) = 1/2 <G theta, theta> - <theta, b>``, ``b = uT - S(T) u0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from kp2lab.errors import ConfigurationError, IllConditioned, NonConvergence
from kp2lab.observability import GramianHandle, _ctrl_traces, gramian_apply
from kp2lab.pde_core import ControlSignal, Field, SimConfig, propagator, simulate


@dataclass(frozen=True)
class ControlProblem:
    u0: Field
    uT: Field
    T: float
    dt: float
    cg_tol: float = 1e-6
    cg_maxit: int = 500
    drift: bool = True
    stall_window: int = 50

    def __post_init__(self):
        if self.u0.grid != self.uT.grid:
            raise ConfigurationError("u0 and uT live on different grids")
        if not self.cg_tol > 0:
            raise ConfigurationError("cg_tol must be positive")
        if self.cg_maxit < 1:
            raise ConfigurationError("cg_maxit must be >= 1")
        SimConfig(self.T, self.dt)

    @property
    def grid(self):
        return self.u0.grid

    def handle(self) -> GramianHandle:
        return GramianHandle(self.grid, self.T, self.dt, "ctrl", drift=self.drift)


@dataclass
class ControlSolution:
    h: ControlSignal
    thetaT: Field
    residual: float
    iterations: int
    terminal_error: float = math.nan
    lambda_history: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)


def hum_rhs(problem: ControlProblem) -> Field:
    """``b = uT - S(T) u0`` from one homogeneous forward solve."""
    grid = problem.grid
    cfg = SimConfig(problem.T, problem.dt, problem.drift)
    prop = propagator(grid, cfg)
    v = problem.u0.flat.copy()
    for _ in range(cfg.steps):
        v = prop.forward(v)
    return Field(grid, problem.uT.flat - v)


def control_from_theta(problem: ControlProblem, thetaT: np.ndarray) -> ControlSignal:
    tau = _ctrl_traces(problem.handle(), thetaT)
    return ControlSignal(tau.T.copy(), np.linspace(0.0, problem.T, tau.shape[0]))


def synthesize_control(problem: ControlProblem) -> ControlSolution:
    """Solve ``G theta_T = b`` by conjugate gradients.

    The discrete inner product is a scalar multiple of the Euclidean one, so
    plain CG on ``G`` minimizes the discrete ``Lambda``. Raises
    ``IllConditioned`` when the best residual fails to improve by 1% over
    ``stall_window`` iterations and ``NonConvergence`` at ``cg_maxit``; both
    carry the best iterate found as ``info["solution"]``.
    """
    grid = problem.grid
    handle = problem.handle()
    b = hum_rhs(problem).flat
    w = grid.dx * grid.dy
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return ControlSolution(control_from_theta(problem, x), Field(grid, x), 0.0, 0)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    lam_hist, res_hist = [0.0], [1.0]
    best, best_it, best_x = 1.0, 0, x.copy()

    def partial() -> ControlSolution:
        return ControlSolution(control_from_theta(problem, best_x), Field(grid, best_x),
                               best, best_it, lambda_history=lam_hist,
                               residual_history=res_hist)

    it = 0
    while math.sqrt(rr) / bnorm > problem.cg_tol:
        if it >= problem.cg_maxit:
            raise NonConvergence(f"CG reached {it} iterations, best residual {best:.3e}",
                                 residual=best, iterations=it, solution=partial())
        if it - best_it >= problem.stall_window:
            raise IllConditioned(
                f"CG stagnated: residual {best:.3e} not improved by 1% in "
                f"{problem.stall_window} iterations", residual=best, iterations=it,
                solution=partial())
        Gp = gramian_apply(p, handle)
        pGp = float(p @ Gp)
        if not pGp > 0:
            raise IllConditioned(f"Gramian lost positivity (p.Gp = {pGp:.3e})",
                                 residual=best, iterations=it, solution=partial())
        step = rr / pGp
        x = x + step * p
        r = r - step * Gp
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
        lam_hist.append(-0.5 * w * float(x @ (b + r)))
        rel = math.sqrt(rr) / bnorm
        res_hist.append(rel)
        if rel < 0.99 * best:
            best, best_it, best_x = rel, it, x.copy()
    true_res = float(np.linalg.norm(gramian_apply(x, handle) - b) / bnorm)
    return ControlSolution(control_from_theta(problem, x), Field(grid, x), true_res, it,
                           lambda_history=lam_hist, residual_history=res_hist)


def verify_control(problem: ControlProblem, solution: ControlSolution) -> float:
    """Relative terminal error of the forward run driven by ``solution.h``."""
    cfg = SimConfig(problem.T, problem.dt, problem.drift, "control")
    traj = simulate(problem.u0, cfg, solution.h)
    err = Field(problem.grid, traj.final.values - problem.uT.values).norm()
    scale = max(problem.uT.norm(), np.finfo(float).eps)
    solution.terminal_error = err / scale
    return solution.terminal_error
