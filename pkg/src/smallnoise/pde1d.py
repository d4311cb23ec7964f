"""Finite-difference oracles in one space dimension.

Backward equations on a truncated interval for

* Psi = -eps log E[...]:  Psi_t + (eps/2) s^2 Psi_xx + (b - s u) Psi_x - 1/2 s^2 Psi_x^2 - u^2 = 0
* Phi (linear form):      Phi_t + (eps/2) s^2 Phi_xx + (b - s u) Phi_x + u^2 Phi / eps = 0
* v0 (eps = 0 limit of the Psi equation)

with terminal data 2h, exp(-2h/eps) and 2h respectively.

The nonlinear equations use Strang splitting: half a Crank-Nicolson diffusion
step, a full explicit SSP-RK2 step of the first-order part with a local
Lax-Friedrichs flux and ENO2 one-sided differences, then the other half of the
diffusion.  Boundary nodes carry no diffusion and ghost values come from
linear extrapolation.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .model import ControlPolicy, ProblemSpec

Array = np.ndarray

CFL_LIMIT = 0.5
MAX_REFINEMENTS = 6
UNDERFLOW_FLOOR = -700.0


class CFLError(RuntimeError):
    pass


class UnderflowError(RuntimeError):
    pass


class SolutionKind(enum.Enum):
    PSI = "psi"
    PHI = "phi"
    V0 = "v0"


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    nx: int = 801
    nt: int = 4000

    def __post_init__(self):
        if self.nx < 3:
            raise ValueError("nx must be at least 3")
        if self.nt < 1:
            raise ValueError("nt must be positive")
        if not self.x_min < self.x_max:
            raise ValueError("x_min must be below x_max")

    @property
    def x(self) -> Array:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    def interior_third(self) -> tuple[float, float]:
        w = (self.x_max - self.x_min) / 3.0
        return self.x_min + w, self.x_max - w

    def refined(self) -> "Grid1D":
        """Half the space and time steps on the same interval."""
        return Grid1D(self.x_min, self.x_max, 2 * self.nx - 1, 2 * self.nt)


def default_grid(spec: ProblemSpec, eps: Optional[float] = None,
                 nx: int = 801, nt: int = 4000) -> Grid1D:
    """x0 +- 6 max(1, sqrt(eps tau) sigma(x0), |b(x0)| tau)."""
    eps = spec.epsilon if eps is None else eps
    x0 = spec.x0[None, :]
    tau = spec.T - spec.t0
    sig = abs(float(spec.model.sigma(x0)[0, 0, 0]))
    drift = abs(float(spec.model.b(x0)[0, 0]))
    half = 6.0 * max(1.0, math.sqrt(max(eps, 0.0) * tau) * sig, drift * tau)
    c = float(spec.x0[0])
    return Grid1D(c - half, c + half, nx, nt)


@dataclass(frozen=True)
class PdeSolution1D:
    grid: Grid1D
    times: Array
    values: Array
    kind: SolutionKind
    epsilon: float

    def at(self, t: float, x: float) -> float:
        """Bilinear interpolation in (t, x); points must lie inside the grid."""
        g = self.grid
        if not (g.x_min <= x <= g.x_max) or not (self.times[0] - 1e-12 <= t <= self.times[-1] + 1e-12):
            raise ValueError(f"({t}, {x}) lies outside the solution grid")
        ft = (t - self.times[0]) / (self.times[-1] - self.times[0]) * (len(self.times) - 1)
        fx = (x - g.x_min) / g.dx
        i = min(int(math.floor(ft)), len(self.times) - 2)
        j = min(int(math.floor(fx)), g.nx - 2)
        i, j = max(i, 0), max(j, 0)
        a, b = ft - i, fx - j
        V = self.values
        return float((1 - a) * ((1 - b) * V[i, j] + b * V[i, j + 1])
                     + a * ((1 - b) * V[i + 1, j] + b * V[i + 1, j + 1]))

    def initial_slice(self) -> Array:
        return self.values[0]

    def interior_mask(self) -> Array:
        lo, hi = self.grid.interior_third()
        x = self.grid.x
        return (x >= lo) & (x <= hi)

    def to_csv(self, path, time_stride: int = 1) -> None:
        x = self.grid.x
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "value"])
            for i in range(0, len(self.times), time_stride):
                for xj, v in zip(x, self.values[i]):
                    w.writerow([repr(float(self.times[i])), repr(float(xj)), repr(float(v))])


# --------------------------------------------------------------------------- #
# discretization pieces
# --------------------------------------------------------------------------- #


def _check_1d(spec: ProblemSpec):
    if spec.dim != 1:
        raise ValueError("the PDE oracles are one-dimensional")
    if not spec.cost.smooth:
        raise ValueError("the PDE oracles need a smooth terminal cost")


def _control_on_grid(control: ControlPolicy, t: float, X: Array) -> Array:
    if control.is_zero:
        return np.zeros(X.shape[0])
    return np.asarray(control(t, X), dtype=float)[:, 0]


def _with_ghosts(v: Array) -> Array:
    # two ghost nodes per side by linear extrapolation
    left = v[0] - np.array([2.0, 1.0]) * (v[1] - v[0])
    right = v[-1] + np.array([1.0, 2.0]) * (v[-1] - v[-2])
    return np.concatenate([left, v, right])


def _eno2_derivatives(v: Array, dx: float) -> tuple[Array, Array]:
    """Left- and right-biased second-order ENO approximations of v_x."""
    g = _with_ghosts(v)
    d1 = np.diff(g) / dx                 # d1[k] between g[k], g[k+1]
    d2 = np.diff(g, 2) / dx              # d2[k] centred at g[k+1] (scaled by 1/dx)
    n = v.size
    # node i sits at g[i + 2]
    back = d1[1:n + 1]                   # (v_i - v_{i-1}) / dx
    fwd = d1[2:n + 2]                    # (v_{i+1} - v_i) / dx
    c_im1, c_i, c_ip1 = d2[0:n], d2[1:n + 1], d2[2:n + 2]
    corr_m = np.where(np.abs(c_im1) < np.abs(c_i), c_im1, c_i)
    corr_p = np.where(np.abs(c_i) < np.abs(c_ip1), c_i, c_ip1)
    return back + 0.5 * corr_m, fwd - 0.5 * corr_p


class _Coefficients:
    def __init__(self, spec: ProblemSpec, control: ControlPolicy, grid: Grid1D):
        self.X = grid.x[:, None]
        self.b = spec.model.b(self.X)[:, 0]
        self.sig = spec.model.sigma(self.X)[:, 0, 0]
        self.a = self.sig**2
        self.control = control

    def drift_and_u(self, t: float):
        u = _control_on_grid(self.control, t, self.X)
        return self.b - self.sig * u, u


def _hamiltonian_step(psi: Array, dx: float, beta: Array, a: Array, u2: Array) -> tuple[Array, float]:
    """F(x, Psi_x) = beta p - a p^2 / 2 - u^2 via the local Lax-Friedrichs flux."""
    pm, pp = _eno2_derivatives(psi, dx)
    alpha = np.maximum(np.abs(beta - a * pm), np.abs(beta - a * pp))
    pbar = 0.5 * (pm + pp)
    F = beta * pbar - 0.5 * a * pbar**2 - u2 + 0.5 * alpha * (pp - pm)
    return F, float(np.max(alpha))


class _Diffusion:
    """Crank-Nicolson half steps for v_tau = k(x) v_xx with inert boundary rows."""

    def __init__(self, k: Array, dx: float, dt: float):
        n = k.size
        r = k * dt / dx**2
        r[0] = r[-1] = 0.0
        self.r = r
        ab = np.zeros((3, n))
        ab[1] = 1.0 + r
        ab[0, 1:] = -0.5 * r[:-1]
        ab[2, :-1] = -0.5 * r[1:]
        self.ab = ab

    def step(self, v: Array) -> Array:
        rhs = v.copy()
        lap = np.zeros_like(v)
        lap[1:-1] = v[:-2] - 2 * v[1:-1] + v[2:]
        rhs += 0.5 * self.r * lap
        return solve_banded((1, 1), self.ab, rhs)


def _march_nonlinear(spec: ProblemSpec, control: ControlPolicy, grid: Grid1D,
                     eps: float) -> PdeSolution1D:
    coef = _Coefficients(spec, control, grid)
    dx = grid.dx
    nt = grid.nt
    for _ in range(MAX_REFINEMENTS + 1):
        try:
            values = _march_once(spec, coef, grid, nt, eps)
            used = Grid1D(grid.x_min, grid.x_max, grid.nx, nt)
            times = np.linspace(spec.t0, spec.T, nt + 1)
            kind = SolutionKind.PSI if eps > 0 else SolutionKind.V0
            return PdeSolution1D(used, times, values, kind, eps)
        except _CFLRetry:
            nt *= 2
    raise CFLError(f"CFL condition still violated after {MAX_REFINEMENTS} time refinements "
                   f"(nt={nt // 2}, dx={dx:.3g})")


class _CFLRetry(Exception):
    pass


def _march_once(spec, coef: _Coefficients, grid: Grid1D, nt: int, eps: float) -> Array:
    dx = grid.dx
    dt = (spec.T - spec.t0) / nt
    diff = _Diffusion(0.5 * eps * coef.a, dx, 0.5 * dt) if eps > 0 else None
    times = np.linspace(spec.t0, spec.T, nt + 1)
    out = np.empty((nt + 1, grid.nx))
    v = 2.0 * spec.cost(coef.X)
    out[nt] = v
    for n in range(nt, 0, -1):
        t_hi, t_lo = times[n], times[n - 1]
        if diff is not None:
            v = diff.step(v)
        beta, u = coef.drift_and_u(t_hi)
        F, amax = _hamiltonian_step(v, dx, beta, coef.a, u * u)
        if amax * dt / dx > CFL_LIMIT:
            raise _CFLRetry
        v1 = v + dt * F
        beta, u = coef.drift_and_u(t_lo)
        F, amax = _hamiltonian_step(v1, dx, beta, coef.a, u * u)
        if amax * dt / dx > CFL_LIMIT:
            raise _CFLRetry
        v = 0.5 * (v + v1 + dt * F)
        if diff is not None:
            v = diff.step(v)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite values at t={t_lo:.6g}")
        out[n - 1] = v
    return out


# --------------------------------------------------------------------------- #
# public solvers
# --------------------------------------------------------------------------- #


def solve_psi(spec: ProblemSpec, control: ControlPolicy, grid: Optional[Grid1D] = None) -> PdeSolution1D:
    """Psi^eps = -eps log Q^eps on the grid, by the nonlinear equation."""
    _check_1d(spec)
    grid = grid or default_grid(spec)
    return _march_nonlinear(spec, control, grid, spec.epsilon)


def solve_v0_hjb(spec: ProblemSpec, control: ControlPolicy, grid: Optional[Grid1D] = None) -> PdeSolution1D:
    """The eps = 0 first-order equation for v0, with terminal data 2h."""
    _check_1d(spec)
    grid = grid or default_grid(spec, eps=0.0)
    return _march_nonlinear(spec, control, grid, 0.0)


def solve_phi(spec: ProblemSpec, control: ControlPolicy, grid: Optional[Grid1D] = None) -> PdeSolution1D:
    """Phi^eps = Q^eps on the grid by the linear equation (Crank-Nicolson, fourth-order in space).

    Values are stored as -eps log Phi would overflow otherwise; here ``values``
    holds Phi itself, rescaled internally by a constant to stay representable.
    """
    _check_1d(spec)
    grid = grid or default_grid(spec)
    eps = spec.epsilon
    coef = _Coefficients(spec, control, grid)
    log_terminal = -2.0 * spec.cost(coef.X) / eps
    if float(np.max(log_terminal)) < UNDERFLOW_FLOOR:
        raise UnderflowError("exp(-2h/eps) underflows on the whole grid; use solve_psi instead")
    shift = float(np.max(log_terminal))
    nt, dx = grid.nt, grid.dx
    dt = (spec.T - spec.t0) / nt
    times = np.linspace(spec.t0, spec.T, nt + 1)
    n = grid.nx
    k = 0.5 * eps * coef.a

    # five-point fourth-order stencils inside, three-point next to the ends, and
    # linear extrapolation (v_0 - 2 v_1 + v_2 = 0) as the boundary rows
    w2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12 * dx**2)
    w1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / (12 * dx)
    v2 = np.array([0.0, 1.0, -2.0, 1.0, 0.0]) / dx**2
    v1 = np.array([0.0, -1.0, 0.0, 1.0, 0.0]) / (2 * dx)
    inner = np.zeros(n, dtype=bool)
    inner[2:-2] = True

    def operator(t):
        """Diagonals L[o] (offset o - 2) of the spatial operator, boundary rows zero."""
        beta, u = coef.drift_and_u(t)
        W2 = np.where(inner[:, None], w2, v2)
        W1 = np.where(inner[:, None], w1, v1)
        rows = k[:, None] * W2 + beta[:, None] * W1
        rows[:, 2] += u * u / eps
        rows[0] = rows[-1] = 0.0
        return rows

    def apply(rows, v):
        vp = np.concatenate([[0.0, 0.0], v, [0.0, 0.0]])
        return sum(rows[:, o] * vp[o:o + n] for o in range(5))

    def banded(rows):
        # solve_banded layout: ab[2 + i - j, j] = A[i, j]
        ab = np.zeros((5, n))
        lhs = -0.5 * dt * rows
        lhs[:, 2] += 1.0
        lhs[0] = [0.0, 0.0, 1.0, -2.0, 1.0]
        lhs[-1] = [1.0, -2.0, 1.0, 0.0, 0.0]
        for o in range(5):
            off = o - 2
            i = np.arange(n)
            j = i + off
            ok = (j >= 0) & (j < n)
            ab[2 - off, j[ok]] = lhs[i[ok], o]
        return ab

    out = np.empty((nt + 1, n))
    v = np.exp(log_terminal - shift)
    out[nt] = v
    for m in range(nt, 0, -1):
        rows = operator(0.5 * (times[m] + times[m - 1]))
        rhs = v + 0.5 * dt * apply(rows, v)
        rhs[0] = rhs[-1] = 0.0
        v = solve_banded((2, 2), banded(rows), rhs)
        out[m - 1] = v
    lo, hi = grid.interior_third()
    xs = grid.x
    if np.any(out[:, (xs >= lo) & (xs <= hi)] <= 0):
        raise UnderflowError("Phi lost positivity on the interior third; use solve_psi instead")
    if shift > 700.0:
        raise UnderflowError("Phi exceeds floating-point range on this grid; use solve_psi instead")
    return PdeSolution1D(grid, times, out * math.exp(shift), SolutionKind.PHI, eps)


def phi_to_psi(sol: PdeSolution1D) -> Array:
    """-eps log Phi on the grid (NaN where Phi is not positive)."""
    if sol.kind is not SolutionKind.PHI:
        raise ValueError("expected a Phi solution")
    # far tails can dip to round-off negatives where Phi is ~ exp(-2h/eps); those are NaN
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(sol.values > 0, -sol.epsilon * np.log(np.abs(sol.values)), np.nan)


def max_principle_bounds(spec: ProblemSpec, control: ControlPolicy,
                         sol: PdeSolution1D) -> tuple[Array, float]:
    """Per-time lower bound and the upper bound 2 max h for Psi on the grid.

    The lower bound is min(0, 2 inf h) - |u|^2_inf (T - t); with h >= 0 it
    reduces to min(0, -|u|^2_inf (T - t)).  inf h is taken over the grid,
    which is only trustworthy when the grid minimum of h is interior; when it
    sits at an endpoint h may keep decreasing off the grid and the lower bound
    is -inf.
    """
    X = sol.grid.x[:, None]
    stride = max(1, len(sol.times) // 50)
    u_inf = max(float(np.max(np.abs(_control_on_grid(control, float(t), X))))
                for t in sol.times[::stride])
    h = spec.cost(X)
    i_min = int(np.argmin(h))
    h_min = float(h[i_min]) if 0 < i_min < len(h) - 1 or h[i_min] >= 0 else -math.inf
    lower = min(0.0, 2.0 * h_min) - u_inf**2 * (spec.T - sol.times)
    upper = 2.0 * float(np.max(h))
    return lower, upper
