"""Matrix-free observability Gramians and their smallest eigenvalue."""

from __future__ import annotations

import dataclasses
import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from kp2lab.errors import ConfigurationError, Kp2Error, NonConvergence
from kp2lab.pde_core import (Field, Grid, SimConfig, from_modal, modal_propagator,
                             to_modal)

MODES = ("ctrl", "stab")


@dataclass(frozen=True)
class GramianHandle:
    """Implicit Gramian ``G`` on grid functions.

    Parameters
    ----------
    grid : Grid
        Spatial discretization.
    T, dt : float
        Horizon and (upper bound on the) time step.
    mode : {"ctrl", "stab"}
        ``ctrl`` observes ``theta_x(L, y, t)`` of the backward adjoint problem
        started from ``theta_T``; ``stab`` observes ``u_x(0, y, t)`` and
        ``d_x^{-1} u_y(0, y, t)`` of the feedback-closed forward problem.
    alpha : float
        Feedback gain used by ``stab``.
    drift : bool
        Keep the ``u_x`` term.

    Notes
    -----
    Each trace is averaged over consecutive time levels before squaring,
    which is the quadrature the Crank-Nicolson duality is exact for. With it
    ``<G x, x>`` equals the time-space integral of the squared trace(s) and
    ``G`` is symmetric positive semidefinite to round-off.
    """

    grid: Grid
    T: float
    dt: float
    mode: str = "ctrl"
    alpha: float = 0.5
    drift: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.sim_config()  # validates T, dt, alpha

    def sim_config(self) -> SimConfig:
        if self.mode == "ctrl":
            return SimConfig(self.T, self.dt, self.drift, "control")
        return SimConfig(self.T, self.dt, self.drift, "feedback", self.alpha)

    @property
    def size(self) -> int:
        return self.grid.size


def _modal_ctrl_traces(handle: GramianHandle, theta_T: np.ndarray) -> np.ndarray:
    grid = handle.grid
    cfg = handle.sim_config()
    prop = modal_propagator(grid, cfg)
    K = cfg.steps
    tau = np.empty((K + 1, grid.Ny))
    c = to_modal(theta_T.reshape(grid.shape))
    for k in range(K, -1, -1):
        tau[k] = -c[-1] / grid.dx
        if k > 0:
            c = prop.backward(c)
    return tau


def _ctrl_traces(handle: GramianHandle, theta_T: np.ndarray) -> np.ndarray:
    """Nodal ``theta_x(L, y_j, t_k)``, shape ``(K+1, Ny)``."""
    return from_modal(_modal_ctrl_traces(handle, theta_T))


def _ctrl_apply(handle: GramianHandle, theta_T: np.ndarray) -> tuple[np.ndarray, float]:
    grid = handle.grid
    cfg = handle.sim_config()
    prop = modal_propagator(grid, cfg)
    tau = _modal_ctrl_traces(handle, theta_T)
    mid = 0.5 * (tau[1:] + tau[:-1])
    c = np.zeros(grid.shape)
    for k in range(cfg.steps):
        c = prop.forward(c, mid[k])
    form = float(prop.dt * grid.dy * np.sum(mid * mid))
    return from_modal(c).ravel(), form


def _observe(grid: Grid, weights: np.ndarray, c: np.ndarray) -> np.ndarray:
    # u_x(0) and the y-edge nonlocal trace, the latter in a modal form with equal norm
    return np.concatenate((c[0] / grid.dx, weights * (grid.dx * c.sum(axis=0))))


def _observe_T(grid: Grid, weights: np.ndarray, z: np.ndarray) -> np.ndarray:
    Ny = grid.Ny
    out = np.empty(grid.shape)
    out[:] = (grid.dx * weights * z[Ny:])[None, :]
    out[0] += z[:Ny] / grid.dx
    return out


def _stab_apply(handle: GramianHandle, x: np.ndarray) -> tuple[np.ndarray, float]:
    grid = handle.grid
    cfg = handle.sim_config()
    prop = modal_propagator(grid, cfg)
    weights = np.sqrt(-prop.mu)
    K, w = cfg.steps, prop.dt * grid.dy
    obs = np.empty((K + 1, 2 * grid.Ny))
    c = to_modal(x.reshape(grid.shape))
    obs[0] = _observe(grid, weights, c)
    for k in range(K):
        c = prop.forward(c)
        obs[k + 1] = _observe(grid, weights, c)
    mid = 0.5 * (obs[1:] + obs[:-1])
    form = float(w * np.sum(mid * mid))
    # G x = W^{-1} sum_k w (R^k + R^{k+1})^T C^T mid_k / 2, by Horner in R^T
    q = [0.5 * w * _observe_T(grid, weights, mid[k]) for k in range(K)]
    acc = q[K - 1].copy()
    for m in range(K - 1, -1, -1):
        acc = prop.forward_T(acc)
        acc += q[m]
        if m > 0:
            acc += q[m - 1]
    return from_modal(acc / (grid.dx * grid.dy)).ravel(), form


def gramian_apply(thetaT: Field | np.ndarray, handle: GramianHandle) -> np.ndarray:
    """Return ``G theta_T`` as a flat array."""
    return gramian_apply_with_form(thetaT, handle)[0]


def gramian_apply_with_form(thetaT: Field | np.ndarray,
                            handle: GramianHandle) -> tuple[np.ndarray, float]:
    """``G x`` together with the trace integral computed from the recorded trace."""
    x = thetaT.flat if isinstance(thetaT, Field) else np.ravel(np.asarray(thetaT, dtype=float))
    if x.size != handle.size:
        raise ConfigurationError(f"vector of size {x.size} does not match grid size {handle.size}")
    if handle.mode == "ctrl":
        return _ctrl_apply(handle, x)
    return _stab_apply(handle, x)


def trace_form(thetaT: Field | np.ndarray, handle: GramianHandle) -> float:
    return gramian_apply_with_form(thetaT, handle)[1]


def handle_operator(handle: GramianHandle) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: gramian_apply(x, handle)


def min_eig(apply: Callable[[np.ndarray], np.ndarray] | GramianHandle, tol: float = 1e-6,
            maxit: int = 2000, seed: int = 0, size: int | None = None,
            norm_iters: int = 30) -> tuple[float, int]:
    """Smallest eigenvalue of a symmetric PSD operator by shifted power iteration.

    ``c`` is 1.01 times the Rayleigh estimate after ``norm_iters`` plain power
    steps; the iteration then runs on ``c I - G`` until successive estimates
    of ``lambda_min`` differ by at most ``tol * c``. The returned value is
    the Rayleigh quotient of ``G`` at the final iterate.
    """
    if not tol > 0:
        raise ConfigurationError("tol must be positive")
    if isinstance(apply, GramianHandle):
        size = apply.size
        apply = handle_operator(apply)
    if size is None:
        raise ConfigurationError("size is required for a bare operator")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(size)
    x /= np.linalg.norm(x)
    top = 0.0
    for _ in range(norm_iters):
        y = apply(x)
        top = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0, 0
        x = y / ny
    c = 1.01 * max(top, float(np.linalg.norm(apply(x))))
    x = rng.standard_normal(size)
    x /= np.linalg.norm(x)
    prev = math.inf
    lam = math.inf
    for it in range(1, maxit + 1):
        gx = apply(x)
        lam = float(x @ gx)
        y = c * x - gx
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return lam, it
        x = y / ny
        if abs(lam - prev) <= tol * c:
            return float(x @ apply(x)), it
        prev = lam
    raise NonConvergence(f"min_eig did not converge in {maxit} iterations",
                         bracket=(min(prev, lam), max(prev, lam)), lambda_min=lam,
                         iterations=maxit, shift=c)


@dataclass(frozen=True)
class ObservabilityReport:
    L: float
    T: float
    Nx: int
    Ny: int
    dt: float
    mode: str
    lambda_min: float
    iterations: int
    converged: bool
    local_min: bool = False
    error: str = ""

    @property
    def C_obs(self) -> float:
        return 1.0 / self.lambda_min if self.lambda_min > 0 else math.inf


def grid_for_length(L: float, dx_target: float, aspect: float = 0.5) -> Grid:
    """Grid with ``dx`` close to ``dx_target`` and ``Ny = aspect * Nx``."""
    if not dx_target > 0:
        raise ConfigurationError("dx_target must be positive")
    nx = max(8, int(round(L / dx_target)) - 1)
    return Grid(L, nx, max(4, int(round(aspect * nx))))


def flag_local_minima(values: Sequence[float]) -> list[bool]:
    """Interior points strictly below both neighbours; end points are never flagged."""
    flags = [False] * len(values)
    for i in range(1, len(values) - 1):
        v = values[i]
        flags[i] = bool(math.isfinite(v) and v < values[i - 1] and v < values[i + 1])
    return flags


def scan_one(L: float, T: float, dt: float, dx_target: float, mode: str = "ctrl",
             alpha: float = 0.5, tol: float = 1e-6, maxit: int = 2000,
             seed: int = 0) -> ObservabilityReport:
    """Report for a single length; errors become a failed report instead of raising."""
    try:
        grid = grid_for_length(L, dx_target)
    except Kp2Error as exc:
        return ObservabilityReport(L, T, 0, 0, dt, mode, math.nan, 0, False, error=str(exc))
    try:
        handle = GramianHandle(grid, T, dt, mode, alpha)
        lam, its = min_eig(handle, tol, maxit, seed)
        return ObservabilityReport(L, T, grid.Nx, grid.Ny, dt, mode, lam, its, True)
    except NonConvergence as exc:
        lam = exc.info.get("lambda_min", math.nan)
        return ObservabilityReport(L, T, grid.Nx, grid.Ny, dt, mode, lam, maxit, False,
                                   error=str(exc))
    except Kp2Error as exc:
        return ObservabilityReport(L, T, grid.Nx, grid.Ny, dt, mode, math.nan, 0, False,
                                   error=str(exc))


def scan(L_values: Sequence[float], T: float, dt: float, dx_target: float, mode: str = "ctrl",
         alpha: float = 0.5, tol: float = 1e-6, maxit: int = 2000, seed: int = 0,
         workers: int = 1) -> list[ObservabilityReport]:
    """One report per length, in input order; failures are recorded and the scan continues."""
    if not len(L_values):
        raise ConfigurationError("empty list of lengths")
    task = functools.partial(scan_one, T=T, dt=dt, dx_target=dx_target, mode=mode,
                             alpha=alpha, tol=tol, maxit=maxit, seed=seed)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(task, L_values))
    else:
        reports = [task(L) for L in L_values]
    flags = flag_local_minima([r.lambda_min for r in reports])
    return [dataclasses.replace(r, local_min=f) for r, f in zip(reports, flags)]


def dense_gramian(handle: GramianHandle, max_size: int = 2048) -> np.ndarray:
    """Assemble ``G`` column by column; for small grids and cross-checks only."""
    if handle.size > max_size:
        raise ConfigurationError(f"grid size {handle.size} exceeds dense limit {max_size}")
    eye = np.eye(handle.size)
    return np.column_stack([gramian_apply(e, handle) for e in eye])
