"""Minimum-action solvers for G and v0 over discretized paths.

Both problems minimize

    sum_k  Delta * [ 1/2 |(phi_{k+1} - phi_k)/Delta - c(s_k, phi_k)|^2_{a^{-1}(phi_k)}
                     + pot(s_k, phi_k) ]  +  H(phi_M)

over phi_1..phi_M with phi_0 = x pinned.  For G: c = b, pot = 0, H = h.  For v0:
c = b - sigma u, pot = -|u|^2, H = 2h.

The optimizer is gradient descent in the discrete H^1 metric induced by the
kinetic term (a tridiagonal preconditioner), with Armijo backtracking and
multiple starts.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .model import ControlPolicy, ProblemSpec, diffusion_matrix

Array = np.ndarray

UNBOUNDED_LEVEL = -1e6


class DerivativeError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerOptions:
    nodes: int = 200
    max_iterations: int = 2000
    gradient_tolerance: float = 1e-8
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.nodes < 2:
            raise ValueError("need at least M = 2 path nodes")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass(frozen=True)
class DiscretePath:
    times: Array
    states: Array
    value: float


@dataclass(frozen=True)
class VariationalResult:
    value: float
    optimizer: DiscretePath
    converged: bool
    gradient_norm: float
    restarts_used: int
    iterations: int = 0
    unbounded: bool = False


class _PathObjective:
    def __init__(self, t0: float, T: float, x: Array, M: int,
                 fields: Callable[[Array, Array], tuple],
                 terminal: Callable[[Array], Array]):
        # fields(s, P) -> (effective drift (M, d), a^{-1} (M, d, d), potential (M,) or None)
        self.x = np.asarray(x, dtype=float)
        self.d = self.x.size
        self.M = M
        self.times = np.linspace(t0, T, M + 1)
        self.delta = (T - t0) / M
        self.s = self.times[:-1]
        self.fields = fields
        self.terminal = terminal

    def drift(self, s: Array, P: Array) -> Array:
        return self.fields(s, P)[0]

    def path(self, Y: Array) -> Array:
        return np.vstack([self.x[None, :], Y])

    def _local(self, P: Array, V: Array):
        """Per-segment integrand at left nodes P (M, d) with velocities V (M, d)."""
        c, A, pot = self.fields(self.s, P)
        r = V - c
        if A.shape[-1] == 1:
            Ar = A[:, :, 0] * r
        else:
            Ar = np.einsum("kij,kj->ki", A, r)
        val = 0.5 * np.sum(r * Ar, axis=1)
        if pot is not None:
            val = val + pot
        return val, Ar, A

    def value(self, Y: Array) -> float:
        phi = self.path(Y)
        V = np.diff(phi, axis=0) / self.delta
        loc, _, _ = self._local(phi[:-1], V)
        return float(self.delta * math.fsum(loc) + self.terminal(phi[-1:])[0])

    def value_and_grad(self, Y: Array):
        phi = self.path(Y)
        P = phi[:-1]
        V = np.diff(phi, axis=0) / self.delta
        loc, Ar, A = self._local(P, V)
        J = self.delta * math.fsum(loc) + float(self.terminal(phi[-1:])[0])

        g = np.zeros_like(Y)
        g += Ar                    # d/d phi_{k+1} of segment k
        g[:-1] -= Ar[1:]           # d/d phi_k of segment k via the velocity
        # explicit state dependence at fixed velocity, nodes 1..M-1
        if self.M > 1:
            Pi, Vi = P[1:], V[1:]
            s_save = self.s
            self.s = s_save[1:]
            try:
                for j in range(self.d):
                    eta = 1e-6 * np.maximum(1.0, np.abs(Pi[:, j]))
                    Pp, Pm = Pi.copy(), Pi.copy()
                    Pp[:, j] += eta
                    Pm[:, j] -= eta
                    fp, _, _ = self._local(Pp, Vi)
                    fm, _, _ = self._local(Pm, Vi)
                    g[:-1, j] += self.delta * (fp - fm) / (2 * eta)
            finally:
                self.s = s_save
        xM = phi[-1]
        for j in range(self.d):
            eta = 1e-6 * max(1.0, abs(xM[j]))
            e = np.zeros(self.d)
            e[j] = eta
            hp = self.terminal((xM + e)[None, :])[0]
            hm = self.terminal((xM - e)[None, :])[0]
            g[-1, j] += (hp - hm) / (2 * eta)
        w = np.trace(A, axis1=1, axis2=2) / self.d
        return J, g, w

    def precondition(self, g: Array, w: Array, tail: float) -> Array:
        """Solve (K_w / Delta + tail e_M e_M^T) p = g for the H^1 direction."""
        M = self.M
        diag = np.empty(M)
        diag[:-1] = w[:-1] + w[1:]
        diag[-1] = w[-1]
        diag = diag / self.delta
        diag[-1] += tail
        off = -w[1:] / self.delta
        ab = np.zeros((3, M))
        ab[0, 1:] = off
        ab[1] = diag
        ab[2, :-1] = off
        return solve_banded((1, 1), ab, g)


def _terminal_curvature(obj: _PathObjective, xM: Array) -> float:
    eta = 1e-3 * max(1.0, float(np.linalg.norm(xM)))
    tr = 0.0
    h0 = obj.terminal(xM[None, :])[0]
    for j in range(obj.d):
        e = np.zeros(obj.d)
        e[j] = eta
        tr += (obj.terminal((xM + e)[None, :])[0] - 2 * h0 + obj.terminal((xM - e)[None, :])[0]) / eta**2
    return max(0.0, tr / obj.d)


def _descend(obj: _PathObjective, Y: Array, opts: OptimizerOptions):
    tail = _terminal_curvature(obj, Y[-1])
    J, g, w = obj.value_and_grad(Y)
    step = 1.0
    gnorm = math.inf
    it = 0
    for it in range(1, opts.max_iterations + 1):
        p = -obj.precondition(g, w, tail)
        slope = float(np.sum(g * p))
        gnorm = math.sqrt(max(-slope, 0.0))
        if gnorm <= opts.gradient_tolerance:
            return Y, J, gnorm, True, it, False
        alpha = min(1.0, 2.0 * step)
        accepted = False
        for _ in range(60):
            Yn = Y + alpha * p
            Jn = obj.value(Yn)
            if np.isfinite(Jn) and Jn <= J + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # no further decrease representable in floating point
            return Y, J, gnorm, gnorm <= 10 * opts.gradient_tolerance, it, False
        step = alpha
        Y = Yn
        if Jn < UNBOUNDED_LEVEL:
            return Y, Jn, gnorm, False, it, True
        J, g, w = obj.value_and_grad(Y)
    p = -obj.precondition(g, w, tail)
    gnorm = math.sqrt(max(-float(np.sum(g * p)), 0.0))
    return Y, J, gnorm, gnorm <= opts.gradient_tolerance, it, False


def _initial_paths(obj: _PathObjective, opts: OptimizerOptions,
                   initial_path: Optional[Array]) -> list[Array]:
    M, d, x = obj.M, obj.d, obj.x
    starts = []
    if initial_path is not None:
        ip = np.asarray(initial_path, dtype=float).reshape(M + 1, d)
        starts.append(ip[1:] + (x - ip[0]))
        if opts.restarts == 1:
            return starts
    # uncontrolled flow of the effective drift
    flow = np.empty((M + 1, d))
    flow[0] = x
    for k in range(M):
        flow[k + 1] = flow[k] + obj.delta * obj.drift(obj.times[k:k + 1], flow[k:k + 1])[0]
    starts.append(flow[1:])
    if opts.restarts > len(starts):
        # straight line towards the minimizer of the terminal cost over a probe grid
        R = 3.0 * max(1.0, float(np.linalg.norm(x)))
        cands = [x + np.outer(np.linspace(-R, R, 41), e) for e in np.eye(d)]
        cands = np.vstack(cands)
        target = cands[int(np.argmin(obj.terminal(cands)))]
        frac = (obj.times[1:] - obj.times[0]) / (obj.times[-1] - obj.times[0])
        starts.append(x + np.outer(frac, target - x))
    rng = np.random.default_rng(opts.seed)
    frac = (obj.times - obj.times[0]) / (obj.times[-1] - obj.times[0])
    while len(starts) < opts.restarts:
        amp = rng.normal(scale=1.0, size=(3, d))
        bump = sum(np.outer(np.sin(np.pi * (i + 1) * frac), amp[i]) for i in range(3))
        ramp = np.outer(frac, rng.normal(scale=1.0, size=d))
        starts.append((flow + bump + ramp)[1:])
    return starts[:opts.restarts]


def _minimize(obj: _PathObjective, opts: OptimizerOptions,
              initial_path: Optional[Array] = None,
              local_optima: Optional[list] = None) -> VariationalResult:
    """Best of the multi-start descents; converged local optima go to ``local_optima``."""
    best = None
    used = 0
    for Y0 in _initial_paths(obj, opts, initial_path):
        used += 1
        Y, J, gnorm, conv, it, unb = _descend(obj, Y0, opts)
        cand = (J, Y, gnorm, conv, it, unb)
        if local_optima is not None and conv and not unb:
            local_optima.append(DiscretePath(obj.times.copy(), obj.path(Y), float(J)))
        if best is None or J < best[0]:
            best = cand
        if unb:
            break
    J, Y, gnorm, conv, it, unb = best
    path = DiscretePath(obj.times.copy(), obj.path(Y), float(J))
    return VariationalResult(float(J), path, bool(conv and not unb), float(gnorm), used, it, bool(unb))


def _ainv(model, P: Array) -> Array:
    if model.dim == 1:
        sig = model.sigma(P)[:, 0, 0]
        a = sig * sig
        if not np.all(np.isfinite(a)) or np.any(a <= 0):
            diffusion_matrix(model, P)  # raises with the offending point
        return (1.0 / a)[:, None, None]
    return np.linalg.inv(diffusion_matrix(model, P))


def _trivial(spec: ProblemSpec, terminal) -> VariationalResult:
    val = float(terminal(spec.x0[None, :])[0])
    path = DiscretePath(np.array([spec.t0]), spec.x0[None, :].copy(), val)
    return VariationalResult(val, path, True, 0.0, 0)


def solve_G(spec: ProblemSpec, options: OptimizerOptions = OptimizerOptions(),
            initial_path: Optional[Array] = None) -> VariationalResult:
    """inf over paths of the Freidlin-Wentzell action plus h at the endpoint."""
    if not spec.cost.smooth:
        raise ValueError("solve_G needs a smooth terminal cost")
    model = spec.model
    terminal = lambda X: spec.cost(X)
    if spec.T <= spec.t0:
        return _trivial(spec, terminal)
    obj = _PathObjective(spec.t0, spec.T, spec.x0, options.nodes,
                         fields=lambda s, P: (model.b(P), _ainv(model, P), None),
                         terminal=terminal)
    return _minimize(obj, options, initial_path)


def _v0_objective(spec: ProblemSpec, control: ControlPolicy, M: int) -> _PathObjective:
    model = spec.model

    def fields(s, P):
        u = _control_rows(control, s, P)
        sig = model.sigma(P)
        if model.dim == 1:
            c = model.b(P) - sig[:, :, 0] * u
        else:
            c = model.b(P) - np.einsum("kij,kj->ki", sig, u)
        return c, _ainv(model, P), -np.sum(u * u, axis=1)

    return _PathObjective(spec.t0, spec.T, spec.x0, M, fields=fields,
                          terminal=lambda X: 2.0 * spec.cost(X))


def _control_rows(control: ControlPolicy, s: Array, P: Array) -> Array:
    """Evaluate u(s_k, P_k) row by row, vectorizing when the control ignores time."""
    s = np.asarray(s, dtype=float)
    if control.is_zero:
        return np.zeros_like(P)
    try:
        # controls written with numpy broadcasting accept a column of times
        out = np.asarray(control.u(s[:, None], P), dtype=float)
        if out.shape == P.shape:
            return out
    except (TypeError, ValueError):
        pass
    return np.stack([np.asarray(control(float(t), p[None, :]))[0] for t, p in zip(s, P)])


def solve_v0(spec: ProblemSpec, control: ControlPolicy,
             options: OptimizerOptions = OptimizerOptions(),
             initial_path: Optional[Array] = None, probe: bool = True) -> VariationalResult:
    """Leading decay rate v0(t0, x0) of the second moment under ``control``."""
    if not spec.cost.smooth:
        raise ValueError("solve_v0 needs a smooth terminal cost")
    if spec.T <= spec.t0:
        return _trivial(spec, lambda X: 2.0 * spec.cost(X))
    obj = _v0_objective(spec, control, options.nodes)
    res = _minimize(obj, options, initial_path)
    if res.unbounded:
        warnings.warn(f"v0 objective unbounded below for control {control.name!r} "
                      f"(value < {UNBOUNDED_LEVEL:g})", RuntimeWarning, stacklevel=2)
    elif probe and _unbounded_along_probe(obj, res):
        warnings.warn(f"v0 objective decreases without bound along a probe direction for "
                      f"control {control.name!r}", RuntimeWarning, stacklevel=2)
    return res


def _unbounded_along_probe(obj: _PathObjective, res: VariationalResult) -> bool:
    Y = res.optimizer.states[1:]
    frac = ((obj.times - obj.times[0]) / (obj.times[-1] - obj.times[0]))[1:, None]
    for sign in (1.0, -1.0):
        for rho in (10.0, 100.0, 1000.0):
            for e in np.eye(obj.d):
                try:
                    v = obj.value(Y + sign * rho * frac * e)
                except (ValueError, FloatingPointError):
                    continue
                if np.isfinite(v) and v < res.value - 1e3 * (1 + abs(res.value)):
                    return True
    return False


# --------------------------------------------------------------------------- #
# derivatives of v0 in the initial state
# --------------------------------------------------------------------------- #


class V0Field:
    """v0(t, x) on demand, with finite-difference gradient and Hessian in x.

    Values are computed at points snapped to a 1e-6 lattice and cached by
    lattice key, so repeated stencil points are solved once.  Nearby points
    are warm-started from every distinct local optimum found so far, so a
    competing branch of minimizers is not lost between stencil points.
    """

    LATTICE = 1e-6
    MAX_BRANCHES = 3

    def __init__(self, spec: ProblemSpec, control: ControlPolicy,
                 options: OptimizerOptions = OptimizerOptions()):
        if not spec.cost.smooth:
            raise ValueError("v0 is defined here only for smooth terminal costs")
        self.spec = spec
        self.control = control
        self.options = options
        self._cache: dict = {}
        self._branches: list[DiscretePath] = []
        self.solves = 0

    def _key(self, t: float, x: Array):
        q = self.LATTICE
        return (int(round(t / q)), tuple(int(v) for v in np.round(np.asarray(x) / q)))

    def value(self, t: float, x: Array) -> float:
        key = self._key(t, x)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        q = self.LATTICE
        ts = key[0] * q
        xs = np.array(key[1], dtype=float) * q
        if ts >= self.spec.T - 0.5 * q:
            val = float(2.0 * self.spec.cost(xs[None, :])[0])
        else:
            res = self._solve(replace(self.spec, t0=ts, x0=xs))
            self.solves += 1
            if not res.converged:
                raise DerivativeError(f"v0 solve did not converge at t={ts:.6g}, x={xs.tolist()} "
                                      f"(gradient norm {res.gradient_norm:.3g})")
            val = res.value
        self._cache[key] = val
        return val

    def _solve(self, sub: ProblemSpec) -> VariationalResult:
        obj = _v0_objective(sub, self.control, self.options.nodes)
        if self._branches:
            # neighbouring optimizers are near-optimal starts; one descent per branch
            one = replace(self.options, restarts=1)
            found: list[DiscretePath] = []
            results = [_minimize(obj, one, _transplant(b, sub.t0, sub.x0, self.options.nodes), found)
                       for b in self._branches]
            ok = [r for r in results if r.converged]
            if len(ok) == len(results):
                self._branches = _distinct(found, self.MAX_BRANCHES)
                return min(ok, key=lambda r: r.value)
        found = []
        res = _minimize(obj, self.options, None, found)
        self._branches = _distinct(found, self.MAX_BRANCHES)
        return res

    def _step(self, x: Array, rel: float) -> float:
        h = rel * max(1.0, float(np.linalg.norm(x)))
        return round(h / self.LATTICE) * self.LATTICE

    def _center(self, x: Array) -> Array:
        return np.round(np.asarray(x, dtype=float) / self.LATTICE) * self.LATTICE

    def gradient(self, t: float, x: Array) -> Array:
        x = self._center(np.atleast_1d(x))
        h = self._step(x, 1e-3)
        g = np.empty(x.size)
        for j in range(x.size):
            e = np.zeros(x.size)
            e[j] = h
            g[j] = (self.value(t, x + e) - self.value(t, x - e)) / (2 * h)
        return g

    def hessian(self, t: float, x: Array, return_raw: bool = False):
        x = self._center(np.atleast_1d(x))
        d = x.size
        h = self._step(x, 1e-2)
        f0 = self.value(t, x)
        H = np.empty((d, d))
        E = np.eye(d) * h
        for i in range(d):
            H[i, i] = (self.value(t, x + E[i]) - 2 * f0 + self.value(t, x - E[i])) / h**2
            for j in range(d):
                if j == i:
                    continue
                H[i, j] = (self.value(t, x + E[i] + E[j]) - self.value(t, x + E[i] - E[j])
                           - self.value(t, x - E[i] + E[j]) + self.value(t, x - E[i] - E[j])) / (4 * h**2)
        Hs = 0.5 * (H + H.T)
        if return_raw:
            return Hs, H
        return Hs


def _distinct(paths: list[DiscretePath], limit: int, tol: float = 1e-3) -> list[DiscretePath]:
    """Lowest-value paths that differ pointwise by more than ``tol``."""
    out: list[DiscretePath] = []
    for p in sorted(paths, key=lambda p: p.value):
        if all(np.max(np.abs(p.states - q.states)) > tol for q in out):
            out.append(p)
        if len(out) == limit:
            break
    return out


def _transplant(path: DiscretePath, t: float, x: Array, M: int) -> Array:
    """Resample a previous optimizer onto [t, T] and re-pin its start at x."""
    times = np.linspace(t, path.times[-1], M + 1)
    states = np.column_stack([np.interp(times, path.times, path.states[:, j])
                              for j in range(path.states.shape[1])])
    frac = (times - t) / (times[-1] - t)
    return states + np.outer(1.0 - frac, x - states[0])


def v0_gradient(spec: ProblemSpec, control: ControlPolicy, x: Optional[Array] = None,
                options: OptimizerOptions = OptimizerOptions(), t: Optional[float] = None) -> Array:
    field = V0Field(spec, control, options)
    return field.gradient(spec.t0 if t is None else t, spec.x0 if x is None else x)


def v0_hessian(spec: ProblemSpec, control: ControlPolicy, x: Optional[Array] = None,
               options: OptimizerOptions = OptimizerOptions(), t: Optional[float] = None) -> Array:
    field = V0Field(spec, control, options)
    return field.hessian(spec.t0 if t is None else t, spec.x0 if x is None else x)


def kink_warning(spec: ProblemSpec, control: ControlPolicy,
                 options: OptimizerOptions = OptimizerOptions(),
                 half_width: float = 0.5, points: int = 9) -> Optional[str]:
    """Probe v0 along each axis through x0; report a jump in second differences.

    Advisory only: smoothness of v0 cannot be certified numerically.
    """
    field = V0Field(spec, control, options)
    x0 = spec.x0
    for j in range(spec.dim):
        offs = np.linspace(-half_width, half_width, points)
        vals = []
        for o in offs:
            e = np.zeros(spec.dim)
            e[j] = o
            vals.append(field.value(spec.t0, x0 + e))
        d2 = np.diff(vals, 2)
        spread = np.max(np.abs(d2 - np.median(d2)))
        scale = np.median(np.abs(d2)) + 1e-9 * (1 + np.max(np.abs(vals)))
        if spread > 10 * scale and spread > 1e-6:
            return (f"v0 appears non-smooth along axis {j} near x0 "
                    f"(second-difference spread {spread:.3g} vs typical {scale:.3g})")
    return None
