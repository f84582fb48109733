"""Finite-difference Crank-Nicolson solver for the linear KP-II equation on a square.

The state lives on the interior nodes of ``(0, L) x (0, L)``; homogeneous
Dirichlet values on all four edges are implied. The generator realizes

    A u = -u_x - u_xxx - d_x^{-1} u_yy,     d_x^{-1} f (x) = -int_x^L f ds,

with ``u_x(L, y) = h(y)`` (control), ``= 0`` (homogeneous) or
``= -alpha u_x(0, y)`` (feedback) entering through a ghost value of the
third-derivative stencil. The discrete inner product is ``dx*dy*sum(u*v)``,
so the adjoint generator is the plain transpose.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.fft
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from kp2lab.errors import (ConfigurationError, IncompleteTrajectory,
                           ResolutionError, SolverError)

BC_MODES = ("homogeneous", "feedback", "control")
COND_LIMIT = 1e14


@dataclass(frozen=True)
class Grid:
    L: float
    Nx: int
    Ny: int

    def __post_init__(self):
        if not (self.L > 0 and math.isfinite(self.L)):
            raise ConfigurationError(f"L must be positive and finite, got {self.L}")
        if self.Nx < 8 or self.Ny < 4:
            raise ResolutionError(f"need Nx >= 8 and Ny >= 4, got {self.Nx}x{self.Ny}")

    @property
    def dx(self) -> float:
        return self.L / (self.Nx + 1)

    @property
    def dy(self) -> float:
        return self.L / (self.Ny + 1)

    @property
    def size(self) -> int:
        return self.Nx * self.Ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.Nx, self.Ny)

    def x(self) -> np.ndarray:
        return self.dx * np.arange(1, self.Nx + 1)

    def y(self) -> np.ndarray:
        return self.dy * np.arange(1, self.Ny + 1)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x(), self.y(), indexing="ij")

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(self.dx * self.dy * np.dot(np.ravel(u), np.ravel(v)))


@dataclass
class Field:
    """Grid function on interior nodes, stored as an ``(Nx, Ny)`` array."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.size != self.grid.size:
            raise ConfigurationError(
                f"field has {vals.size} values, grid needs {self.grid.size}")
        vals = vals.reshape(self.grid.shape)
        if not np.all(np.isfinite(vals)):
            raise ConfigurationError("field contains non-finite values")
        self.values = vals

    @classmethod
    def zeros(cls, grid: Grid) -> "Field":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable) -> "Field":
        X, Y = grid.mesh()
        return cls(grid, np.broadcast_to(fn(X, Y), grid.shape).astype(float))

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def norm(self) -> float:
        return math.sqrt(self.grid.inner(self.values, self.values))


def sine_mode(grid: Grid, p: int = 1, q: int = 1) -> Field:
    L = grid.L
    return Field.from_function(
        grid, lambda X, Y: np.sin(p * np.pi * X / L) * np.sin(q * np.pi * Y / L))


@dataclass(frozen=True)
class SimConfig:
    """Time horizon, step and boundary closure.

    ``dt`` is an upper bound: the run uses ``ceil(T/dt)`` equal steps.
    ``forcing`` maps ``t`` to an ``(Nx, Ny)`` source array.
    """

    T: float
    dt: float
    drift: bool = True
    bc_mode: str = "homogeneous"
    alpha: float = 0.0
    forcing: Optional[Callable[[float], np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.T > 0 and self.dt > 0 and math.isfinite(self.T)):
            raise ConfigurationError(f"need T > 0 and dt > 0, got T={self.T}, dt={self.dt}")
        if self.dt > self.T:
            raise ConfigurationError(f"dt={self.dt} exceeds T={self.T}")
        if self.bc_mode not in BC_MODES:
            raise ConfigurationError(f"bc_mode must be one of {BC_MODES}, got {self.bc_mode!r}")
        if self.bc_mode == "feedback" and not 0 < abs(self.alpha) <= 1:
            raise ConfigurationError(f"feedback needs 0 < |alpha| <= 1, got {self.alpha}")

    @property
    def steps(self) -> int:
        return max(1, math.ceil(self.T / self.dt - 1e-9))

    @property
    def step_size(self) -> float:
        return self.T / self.steps

    @property
    def closure_alpha(self) -> float:
        return self.alpha if self.bc_mode == "feedback" else 0.0


@dataclass
class ControlSignal:
    """Boundary datum ``h(y_j, t_k)`` on the edge ``x = L``, shape ``(Ny, K+1)``."""

    values: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != self.times.size:
            raise ConfigurationError("control values must have shape (Ny, len(times))")
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("control signal contains non-finite values")

    @classmethod
    def zeros(cls, grid: Grid, cfg: SimConfig) -> "ControlSignal":
        K = cfg.steps
        return cls(np.zeros((grid.Ny, K + 1)), np.linspace(0.0, cfg.T, K + 1))

    def __mul__(self, c: float) -> "ControlSignal":
        return ControlSignal(c * self.values, self.times)

    __rmul__ = __mul__


@dataclass
class Trajectory:
    """Time traces of a run.

    ``ux0``/``uxL`` have shape ``(K+1, Ny)``; ``nonlocal0`` lives on the
    ``Ny+1`` y-edges, shape ``(K+1, Ny+1)``. ``dissipation`` is
    ``-<A u, u>`` at each node state and ``h1x`` is ``int (u^2 + u_x^2)``.
    """

    grid: Grid
    cfg: SimConfig
    times: np.ndarray
    energy: np.ndarray
    ux0: Optional[np.ndarray]
    uxL: Optional[np.ndarray]
    nonlocal0: Optional[np.ndarray]
    dissipation: Optional[np.ndarray] = None
    h1x: Optional[np.ndarray] = None
    final: Optional[Field] = None
    snapshots: list = field(default_factory=list)
    adjoint: bool = False

    @property
    def dt(self) -> float:
        return self.cfg.step_size


# ---------------------------------------------------------------------------
# antiderivatives


def _right_matrix(n: int, dx: float) -> np.ndarray:
    P = np.triu(np.full((n, n), -dx), k=1)
    np.fill_diagonal(P, -dx / 2)
    return P


def _left_matrix(n: int, dx: float) -> np.ndarray:
    Q = np.tril(np.full((n, n), dx), k=-1)
    np.fill_diagonal(Q, dx / 2)
    return Q


def antiderivative_right(f: Field) -> Field:
    """``psi(x) = -int_x^L f``, composite trapezoid with ``f(L) = 0``."""
    g = f.grid
    return Field(g, _right_matrix(g.Nx, g.dx) @ f.values)


def antiderivative_left(f: Field) -> Field:
    """``psi(x) = int_0^x f``, composite trapezoid with ``f(0) = 0``."""
    g = f.grid
    return Field(g, _left_matrix(g.Nx, g.dx) @ f.values)


# ---------------------------------------------------------------------------
# generator


def _first_derivative(n: int, dx: float) -> sp.csr_matrix:
    off = np.full(n - 1, 1.0 / (2 * dx))
    return sp.diags([-off, off], [-1, 1], format="csr")


def _third_derivative(n: int, dx: float, alpha: float) -> sp.csr_matrix:
    # (u[i+2] - 3u[i+1] + 3u[i] - u[i-1]) / dx^3 with u[0] = u[n+1] = 0;
    # the ghost u[n+2] = dx * u_x(L) equals -alpha * u[1] under feedback.
    c = 1.0 / dx ** 3
    D = sp.diags([np.full(n - 1, -c), np.full(n, 3 * c), np.full(n - 1, -3 * c),
                  np.full(n - 2, c)], [-1, 0, 1, 2], format="lil")
    if alpha:
        D[n - 1, 0] += -alpha * c
    return D.tocsr()


def _second_difference(n: int, dy: float) -> sp.csr_matrix:
    c = 1.0 / dy ** 2
    return sp.diags([np.full(n - 1, c), np.full(n, -2 * c), np.full(n - 1, c)],
                    [-1, 0, 1], format="csr")


def x_block(grid: Grid, drift: bool, alpha: float) -> sp.csr_matrix:
    """``-(D1 + D3)`` acting along x for one y-line."""
    Ax = -_third_derivative(grid.Nx, grid.dx, alpha)
    if drift:
        Ax = Ax - _first_derivative(grid.Nx, grid.dx)
    return Ax.tocsr()


def assemble_generator(grid: Grid, cfg: SimConfig, check: bool = True) -> sp.csr_matrix:
    """Sparse ``A_h`` for the closure in ``cfg``; row-major index ``i*Ny + j``.

    With ``check`` the x-block symmetric part is verified to be negative
    semidefinite for homogeneous and feedback closures (the nonlocal part is
    so by construction).
    """
    alpha = cfg.closure_alpha
    Ax = x_block(grid, cfg.drift, alpha)
    Iy = sp.identity(grid.Ny, format="csr")
    P = sp.csr_matrix(_right_matrix(grid.Nx, grid.dx))
    Dyy = _second_difference(grid.Ny, grid.dy)
    A = (sp.kron(Ax, Iy) - sp.kron(P, Dyy)).tocsr()
    if check and cfg.bc_mode != "control":
        sym = (Ax + Ax.T).toarray() / 2
        top = float(np.linalg.eigvalsh(sym)[-1])
        scale = float(np.abs(sym).max())
        if top > 1e-12 * scale:
            raise SolverError(f"generator not dissipative: sym-part eigenvalue {top:.3e}")
    return A


def assemble_adjoint_generator(grid: Grid, cfg: SimConfig) -> sp.csr_matrix:
    """Generator of the adjoint problem, assembled as the x-reflected forward problem.

    Under ``x -> L - x`` the adjoint boundary conditions and the left-anchored
    antiderivative become the forward ones, so this matrix must equal
    ``assemble_generator(grid, cfg).T`` entry for entry.
    """
    rev = np.arange(grid.Nx)[::-1]
    Ax = x_block(grid, cfg.drift, cfg.closure_alpha).toarray()[np.ix_(rev, rev)]
    P = _right_matrix(grid.Nx, grid.dx)[np.ix_(rev, rev)]
    Iy = sp.identity(grid.Ny, format="csr")
    Dyy = _second_difference(grid.Ny, grid.dy)
    return (sp.kron(sp.csr_matrix(Ax), Iy) - sp.kron(sp.csr_matrix(P), Dyy)).tocsr()


def control_lift(grid: Grid) -> sp.csr_matrix:
    """Matrix ``B`` of shape ``(Nx*Ny, Ny)``: ``u' = A u + B h``."""
    rows = (grid.Nx - 1) * grid.Ny + np.arange(grid.Ny)
    vals = np.full(grid.Ny, -1.0 / grid.dx ** 2)
    return sp.csr_matrix((vals, (rows, np.arange(grid.Ny))), shape=(grid.size, grid.Ny))


# ---------------------------------------------------------------------------
# traces and functionals


def energy(f: Field) -> float:
    return 0.5 * f.grid.inner(f.values, f.values)


def trace_ux0(grid: Grid, u: np.ndarray) -> np.ndarray:
    return u[0] / grid.dx


def trace_uxL(grid: Grid, u: np.ndarray) -> np.ndarray:
    return -u[-1] / grid.dx


def trace_nonlocal0(grid: Grid, u: np.ndarray) -> np.ndarray:
    """``d_x^{-1} u_y (0, y)`` on the ``Ny+1`` y-edges."""
    s = np.concatenate(([0.0], grid.dx * u.sum(axis=0), [0.0]))
    return -np.diff(s) / grid.dy


def h1x_density(grid: Grid, u: np.ndarray) -> float:
    padded = np.pad(u, ((1, 1), (0, 0)))
    ux = np.diff(padded, axis=0) / grid.dx
    return float(grid.dx * grid.dy * (np.sum(u * u) + np.sum(ux * ux)))


# ---------------------------------------------------------------------------
# time stepping


class Propagator:
    """Factorized Crank-Nicolson pair ``(I - dt/2 A, I + dt/2 A)``.

    The bundle is immutable after construction and can be shared; stepping
    only touches the arrays passed in.
    """

    def __init__(self, grid: Grid, cfg: SimConfig):
        self.grid = grid
        self.cfg = cfg
        self.dt = cfg.step_size
        self.A = assemble_generator(grid, cfg)
        self.B = control_lift(grid)
        eye = sp.identity(grid.size, format="csc")
        self.M_minus = (eye - 0.5 * self.dt * self.A).tocsc()
        self.M_plus = (eye + 0.5 * self.dt * self.A).tocsr()
        try:
            self.lu = spla.splu(self.M_minus)
        except RuntimeError as exc:
            raise SolverError(f"factorization failed on {grid.Nx}x{grid.Ny}, dt={self.dt}: {exc}")
        self.condition = self._condition_estimate()
        if not self.condition < COND_LIMIT:
            raise SolverError(
                f"condition estimate {self.condition:.2e} exceeds {COND_LIMIT:.0e} "
                f"on {grid.Nx}x{grid.Ny}, dt={self.dt}")

    def _condition_estimate(self) -> float:
        n = self.grid.size
        inv = spla.LinearOperator((n, n), matvec=self.lu.solve,
                                  rmatvec=lambda v: self.lu.solve(v, trans="T"),
                                  dtype=float)
        return float(spla.onenormest(self.M_minus) * spla.onenormest(inv))

    def forward(self, u: np.ndarray, rhs_extra: Optional[np.ndarray] = None) -> np.ndarray:
        rhs = self.M_plus @ u
        if rhs_extra is not None:
            rhs = rhs + rhs_extra
        return self.lu.solve(rhs)

    def backward(self, theta: np.ndarray) -> np.ndarray:
        """One step of ``theta' = A^T theta`` in the reversed time variable."""
        return self.lu.solve(self.M_plus.T @ theta, trans="T")

    def forward_T(self, v: np.ndarray) -> np.ndarray:
        """Transpose of ``forward`` (without source): ``M_plus^T M_minus^{-T} v``."""
        return self.M_plus.T @ self.lu.solve(v, trans="T")

    def solve_T(self, v: np.ndarray) -> np.ndarray:
        return self.lu.solve(v, trans="T")

    def source(self, h_mid: Optional[np.ndarray], f_mid: Optional[np.ndarray]) -> Optional[np.ndarray]:
        extra = None
        if h_mid is not None:
            extra = self.dt * (self.B @ h_mid)
        if f_mid is not None:
            fm = self.dt * np.ravel(f_mid)
            extra = fm if extra is None else extra + fm
        return extra


class ModalPropagator:
    """The same Crank-Nicolson map written in the y-sine basis.

    The orthonormal DST-I along y diagonalizes the Dirichlet second
    difference, so ``A`` splits into ``Ny`` dense ``Nx x Nx`` blocks
    ``A_x - mu_j P``. Stepping all blocks at once is far cheaper than a
    sparse solve when many runs share one operator (Gramian applies). Arrays
    passed in and out are modal coefficients of shape ``(Nx, Ny)``.
    """

    def __init__(self, grid: Grid, cfg: SimConfig):
        self.grid = grid
        self.cfg = cfg
        self.dt = cfg.step_size
        n = grid.Nx
        Ax = x_block(grid, cfg.drift, cfg.closure_alpha).toarray()
        P = _right_matrix(n, grid.dx)
        self.mu = dirichlet_eigenvalues(grid.Ny, grid.dy)
        eye = np.eye(n)
        blocks = Ax[None, :, :] - self.mu[:, None, None] * P[None, :, :]
        minus = eye - 0.5 * self.dt * blocks
        plus = eye + 0.5 * self.dt * blocks
        cond = np.linalg.cond(minus)
        if not np.all(cond < COND_LIMIT):
            raise SolverError(f"modal condition number {cond.max():.2e} exceeds {COND_LIMIT:.0e}")
        self.Minv = np.linalg.inv(minus)
        self.R = self.Minv @ plus
        self.RT = np.ascontiguousarray(np.transpose(self.R, (0, 2, 1)))
        # response of one step to a unit modal boundary datum
        self.lift = -self.dt / grid.dx ** 2 * self.Minv[:, :, n - 1].T

    def forward(self, c: np.ndarray, h_mid_modal: Optional[np.ndarray] = None) -> np.ndarray:
        out = np.einsum("jab,bj->aj", self.R, c)
        if h_mid_modal is not None:
            out += self.lift * h_mid_modal[None, :]
        return out

    def backward(self, c: np.ndarray) -> np.ndarray:
        return np.einsum("jab,bj->aj", self.RT, c)

    forward_T = backward

    def lift_T(self, c: np.ndarray) -> np.ndarray:
        """Transpose of the boundary-datum response."""
        return np.sum(self.lift * c, axis=0)


def dirichlet_eigenvalues(n: int, d: float) -> np.ndarray:
    j = np.arange(1, n + 1)
    return -(4.0 / d ** 2) * np.sin(j * np.pi / (2 * (n + 1))) ** 2


def to_modal(u: np.ndarray) -> np.ndarray:
    return scipy.fft.dst(u, type=1, norm="ortho", axis=-1)


def from_modal(c: np.ndarray) -> np.ndarray:
    return scipy.fft.idst(c, type=1, norm="ortho", axis=-1)


@functools.lru_cache(maxsize=16)
def _cached_modal(grid: Grid, T: float, dt: float, drift: bool, bc_mode: str,
                  alpha: float) -> ModalPropagator:
    return ModalPropagator(grid, SimConfig(T, dt, drift, bc_mode, alpha))


def modal_propagator(grid: Grid, cfg: SimConfig) -> ModalPropagator:
    return _cached_modal(grid, cfg.T, cfg.dt, cfg.drift, cfg.bc_mode, cfg.alpha)


@functools.lru_cache(maxsize=16)
def _cached_propagator(grid: Grid, T: float, dt: float, drift: bool, bc_mode: str,
                       alpha: float) -> Propagator:
    return Propagator(grid, SimConfig(T, dt, drift, bc_mode, alpha))


def propagator(grid: Grid, cfg: SimConfig) -> Propagator:
    return _cached_propagator(grid, cfg.T, cfg.dt, cfg.drift, cfg.bc_mode, cfg.alpha)


def step(state: Field, prop: Propagator, h_mid: Optional[np.ndarray] = None) -> Field:
    """One Crank-Nicolson step; ``h_mid`` is the time-averaged boundary row."""
    if state.grid != prop.grid:
        raise ConfigurationError("state and propagator grids differ")
    return Field(state.grid, prop.forward(state.flat, prop.source(h_mid, None)))


def _check_finite(v: np.ndarray, k: int, grid: Grid, dt: float):
    if not np.all(np.isfinite(v)):
        raise SolverError(f"non-finite state at step {k} on {grid.Nx}x{grid.Ny}, dt={dt}")


def simulate(u0: Field, cfg: SimConfig, h: Optional[ControlSignal] = None,
             keep_every: int = 0) -> Trajectory:
    """March to ``cfg.T`` recording energy, traces and dissipation at every step."""
    grid = u0.grid
    if cfg.bc_mode == "control":
        if h is None:
            raise ConfigurationError("control mode needs a ControlSignal")
        if h.values.shape != (grid.Ny, cfg.steps + 1):
            raise ConfigurationError(
                f"control shape {h.values.shape} != {(grid.Ny, cfg.steps + 1)}")
    elif h is not None:
        raise ConfigurationError(f"a ControlSignal is only accepted in control mode")
    prop = propagator(grid, cfg)
    K, dt = cfg.steps, prop.dt
    times = np.linspace(0.0, cfg.T, K + 1)
    n_edge = grid.Ny + 1
    E = np.empty(K + 1)
    ux0 = np.empty((K + 1, grid.Ny))
    uxL = np.empty((K + 1, grid.Ny))
    nl0 = np.empty((K + 1, n_edge))
    diss = np.empty(K + 1)
    h1x = np.empty(K + 1)
    snaps = []
    A = prop.A

    def record(k: int, v: np.ndarray):
        U = v.reshape(grid.shape)
        E[k] = 0.5 * grid.inner(v, v)
        ux0[k] = trace_ux0(grid, U)
        uxL[k] = trace_uxL(grid, U)
        nl0[k] = trace_nonlocal0(grid, U)
        diss[k] = -grid.inner(A @ v, v)
        h1x[k] = h1x_density(grid, U)
        if keep_every and k % keep_every == 0:
            snaps.append((times[k], U.copy()))

    v = u0.flat.copy()
    record(0, v)
    f_prev = cfg.forcing(0.0) if cfg.forcing is not None else None
    for k in range(K):
        h_mid = None
        if h is not None:
            h_mid = 0.5 * (h.values[:, k] + h.values[:, k + 1])
        f_mid = None
        if cfg.forcing is not None:
            f_next = cfg.forcing(times[k + 1])
            f_mid = 0.5 * (np.asarray(f_prev) + np.asarray(f_next))
            f_prev = f_next
        v = prop.forward(v, prop.source(h_mid, f_mid))
        _check_finite(v, k + 1, grid, dt)
        record(k + 1, v)
    return Trajectory(grid, cfg, times, E, ux0, uxL, nl0, diss, h1x,
                      Field(grid, v), snaps)


def adjoint_trace(grid: Grid, theta: np.ndarray) -> np.ndarray:
    """Discrete ``theta_x(L, y)``, the observation dual to the control lift."""
    return -theta[-1] / grid.dx


def adjoint_simulate(thetaT: Field, cfg: SimConfig, keep_every: int = 0) -> Trajectory:
    """Solve ``theta' = -A^T theta`` backward from ``theta(T) = thetaT``.

    Arrays are indexed by physical time: entry ``k`` belongs to ``t_k``, so
    ``final`` holds ``theta(0)``. ``uxL`` carries the trace ``theta_x(L)``.
    """
    grid = thetaT.grid
    base = SimConfig(cfg.T, cfg.dt, cfg.drift, cfg.bc_mode, cfg.alpha)
    prop = propagator(grid, base)
    K = cfg.steps
    times = np.linspace(0.0, cfg.T, K + 1)
    E = np.empty(K + 1)
    tau = np.empty((K + 1, grid.Ny))
    ux0 = np.empty((K + 1, grid.Ny))
    nl0 = np.empty((K + 1, grid.Ny + 1))
    snaps = []
    v = thetaT.flat.copy()
    for k in range(K, -1, -1):
        U = v.reshape(grid.shape)
        E[k] = 0.5 * grid.inner(v, v)
        tau[k] = adjoint_trace(grid, U)
        ux0[k] = trace_ux0(grid, U)
        nl0[k] = trace_nonlocal0(grid, U)
        if keep_every and (K - k) % keep_every == 0:
            snaps.append((times[k], U.copy()))
        if k > 0:
            v = prop.backward(v)
            _check_finite(v, k - 1, grid, prop.dt)
    return Trajectory(grid, cfg, times, E, ux0, tau, nl0, None, None,
                      Field(grid, v), snaps, adjoint=True)


# ---------------------------------------------------------------------------
# quadratures and estimates


def trapezoid_time(samples: np.ndarray, dt: float) -> float:
    s = np.asarray(samples, dtype=float)
    return float(dt * (s.sum(axis=0) - 0.5 * (s[0] + s[-1])).sum())


def midpoint_square_integral(trace: np.ndarray, dt: float, dy: float) -> float:
    """``sum_k dt * dy * sum_j ((tr_k + tr_{k+1})/2)^2``, the quadrature CN is exact for."""
    mid = 0.5 * (trace[1:] + trace[:-1])
    return float(dt * dy * np.sum(mid * mid))


def duality_gap(u0: Field, thetaT: Field, h: ControlSignal, cfg: SimConfig,
                quadrature: str = "trapezoid") -> float:
    """``<u(T), theta_T> - <u0, theta(0)> - int int h theta_x(L)``.

    ``trapezoid`` integrates the sampled product in time, a consistent but
    inexact rule; ``midpoint`` averages both factors over each step first,
    for which the Crank-Nicolson pair is exactly dual.
    """
    if cfg.bc_mode != "control":
        raise ConfigurationError("duality gap needs a control-mode configuration")
    grid = u0.grid
    fwd = simulate(u0, cfg, h)
    adj = adjoint_simulate(thetaT, cfg)
    lhs = grid.inner(fwd.final.flat, thetaT.flat) - grid.inner(u0.flat, adj.final.flat)
    hv, tau = h.values.T, adj.uxL
    if quadrature == "midpoint":
        hm = 0.5 * (hv[1:] + hv[:-1])
        tm = 0.5 * (tau[1:] + tau[:-1])
        rhs = cfg.step_size * grid.dy * float(np.sum(hm * tm))
    elif quadrature == "trapezoid":
        rhs = trapezoid_time(grid.dy * np.sum(hv * tau, axis=1), cfg.step_size)
    else:
        raise ConfigurationError(f"unknown quadrature {quadrature!r}")
    return float(lhs - rhs)


def kato_constant(T: float, L: float, alpha: float = 0.0) -> float:
    if abs(alpha) >= 1:
        return math.inf
    return 4.0 * T / 3.0 + 2.0 * L / (3.0 * (1.0 - alpha * alpha))


@dataclass(frozen=True)
class EstimateReport:
    kato_ratio: float
    trace_ratio: float
    time_estimate_ratio: float
    identity_residual: float
    boundary_identity_residual: float
    scheme_dissipation_share: float

    def to_dict(self) -> dict:
        return {"kato_ratio": self.kato_ratio,
                "trace_ratio": self.trace_ratio,
                "time_estimate_ratio": self.time_estimate_ratio,
                "identity_residual": self.identity_residual,
                "boundary_identity_residual": self.boundary_identity_residual,
                "scheme_dissipation_share": self.scheme_dissipation_share}


def estimate_report(traj: Trajectory, u0: Field) -> EstimateReport:
    """The four checked ratios of a homogeneous or feedback run.

    (a) Kato: ``int_0^T ||u||_{H^1_x}^2 / (C(T,L,alpha) ||u0||^2)``.
    (b) trace: ``int int u_x(0)^2 / ||u0||^2``.
    (c) time estimate: ``||u0||^2 / (T^{-1} int ||u||^2 + int int u_x(0)^2 + int int (d_x^{-1} u_y(0))^2)``.
    (d) ``|E(0) - E(T) - int D dt| / E(0)`` where ``D = -<A u, u>`` is the full
        discrete dissipation and the time integral is the trapezoid rule.

    ``boundary_identity_residual`` keeps only the two continuum trace terms in (d);
    the difference is the scheme's own O(dx) dissipation.
    """
    needed = (traj.ux0, traj.nonlocal0, traj.dissipation, traj.h1x)
    if traj.adjoint or any(a is None for a in needed):
        raise IncompleteTrajectory("trajectory lacks the traces needed for the report")
    if traj.energy.size < 2:
        raise IncompleteTrajectory("trajectory has fewer than two samples")
    grid, cfg = traj.grid, traj.cfg
    dt, dy = traj.dt, grid.dy
    alpha = cfg.closure_alpha
    norm0 = 2.0 * energy(u0)
    if norm0 == 0.0:
        return EstimateReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    T = cfg.T
    ux0_int = midpoint_square_integral(traj.ux0, dt, dy)
    nl_int = midpoint_square_integral(traj.nonlocal0, dt, dy)
    l2_int = trapezoid_time(2.0 * traj.energy, dt)
    kato = trapezoid_time(traj.h1x, dt) / (kato_constant(T, grid.L, alpha) * norm0)
    trace = ux0_int / norm0
    time_est = norm0 / (l2_int / T + ux0_int + nl_int)
    drop = traj.energy[0] - traj.energy[-1]
    diss_int = trapezoid_time(traj.dissipation, dt)
    resid = abs(drop - diss_int) / traj.energy[0]
    boundary_terms = 0.5 * (1.0 - alpha * alpha) * ux0_int + 0.5 * nl_int
    boundary_resid = abs(drop - boundary_terms) / traj.energy[0]
    share = (diss_int - boundary_terms) / diss_int if diss_int > 0 else 0.0
    return EstimateReport(kato, trace, time_est, resid, boundary_resid, share)


# ---------------------------------------------------------------------------
# field files

_HEADER = struct.Struct("<4sII4xdd")
_MAGIC = b"KP2F"


def encode_field(f: Field, t: float) -> bytes:
    g = f.grid
    return _HEADER.pack(_MAGIC, g.Nx, g.Ny, g.L, t) + f.values.astype("<f8").tobytes()


def decode_field(blob: bytes) -> tuple[Field, float]:
    if len(blob) < _HEADER.size:
        raise ConfigurationError("field file shorter than its header")
    magic, nx, ny, L, t = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise ConfigurationError(f"bad field magic {magic!r}")
    body = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    if body.size != nx * ny:
        raise ConfigurationError(f"field body has {body.size} values, header says {nx}x{ny}")
    return Field(Grid(L, nx, ny), body.reshape(nx, ny).copy()), t


def read_field(path: str | Path) -> tuple[Field, float]:
    return decode_field(Path(path).read_bytes())
