"""Diffusion problems, terminal costs, controls and subsolutions.

Conventions used throughout the package: a state batch has shape ``(..., d)``.
Drift maps it to ``(..., d)``, the diffusion coefficient to ``(..., d, d)``,
terminal costs to ``(...)``.  Controls and subsolutions take a scalar time
``t`` and a state batch.  All callables must be pure and vectorized.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray


class ModelEvaluationError(ValueError):
    """A model coefficient produced a non-finite or degenerate value."""


# --------------------------------------------------------------------------- #
# Domain types
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class DiffusionModel:
    """dX = b(X) ds + sqrt(eps) sigma(X) dW in dimension ``dim``."""

    dim: int
    drift: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    drift_jacobian: Optional[Callable[[Array], Array]] = None
    name: str = ""

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")

    def b(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.drift(x), x.shape).astype(float, copy=False)

    def sigma(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        s = np.asarray(self.diffusion(x), dtype=float)
        return np.broadcast_to(s, x.shape + (self.dim,))


class CostKind(enum.Enum):
    SMOOTH = "smooth"
    STOPPED = "stopped-indicator"


class Region(enum.IntEnum):
    INSIDE = 0
    EXIT_TARGET = 1
    EXIT_OTHER = 2


@dataclass(frozen=True)
class TerminalCost:
    """Terminal cost h; for stopped-indicator costs also a region classifier.

    ``membership`` maps a state batch to integer codes from :class:`Region`.
    For stopped costs ``h`` gives the cost paid on the target set (usually 0);
    paths ending elsewhere pay +inf.
    """

    h: Callable[[Array], Array]
    kind: CostKind = CostKind.SMOOTH
    membership: Optional[Callable[[Array], Array]] = None

    def __post_init__(self):
        if self.kind is CostKind.STOPPED and self.membership is None:
            raise ValueError("stopped-indicator cost needs a membership test")

    @property
    def smooth(self) -> bool:
        return self.kind is CostKind.SMOOTH

    def __call__(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.h(x), x.shape[:-1]).astype(float, copy=False)

    def classify(self, x: Array) -> Array:
        if self.membership is None:
            x = np.asarray(x)
            return np.zeros(x.shape[:-1], dtype=np.int8)
        return np.asarray(self.membership(np.asarray(x, dtype=float)), dtype=np.int8)


@dataclass(frozen=True)
class ControlPolicy:
    """Feedback control u(t, x) defining the sampling measure."""

    u: Callable[[float, Array], Array]
    dim: int
    bound: float = np.inf
    name: str = "custom"
    debug: bool = False

    def __call__(self, t: float, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        out = np.broadcast_to(self.u(t, x), x.shape).astype(float, copy=False)
        if self.debug and np.isfinite(self.bound):
            norms = np.linalg.norm(out, axis=-1)
            if np.any(norms > self.bound * (1 + 1e-12)):
                raise ModelEvaluationError(
                    f"control {self.name!r} exceeds declared bound {self.bound} "
                    f"(max {norms.max():.6g}) at t={t}"
                )
        return out

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"


@dataclass(frozen=True)
class Subsolution:
    value: Callable[[float, Array], Array]
    gradient_x: Callable[[float, Array], Array]
    time_derivative: Callable[[float, Array], Array]
    hessian_x: Optional[Callable[[float, Array], Array]] = None
    name: str = "subsolution"


@dataclass(frozen=True)
class ProblemSpec:
    model: DiffusionModel
    cost: TerminalCost
    t0: float
    T: float
    x0: Array
    epsilon: float
    name: str = "custom"

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.model.dim,):
            raise ValueError(f"x0 has shape {x0.shape}, model dimension is {self.model.dim}")
        object.__setattr__(self, "x0", x0)
        # T == t0 is accepted as an empty horizon (no dynamics).
        if not self.T >= self.t0:
            raise ValueError(f"horizon must satisfy T >= t0, got t0={self.t0}, T={self.T}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def dim(self) -> int:
        return self.model.dim

    @property
    def horizon(self) -> float:
        return self.T - self.t0


# --------------------------------------------------------------------------- #
# Constructors
# --------------------------------------------------------------------------- #


def scalar_model(drift: Callable[[Array], Array], sigma: Callable[[Array], Array],
                 name: str = "", drift_prime: Optional[Callable[[Array], Array]] = None
                 ) -> DiffusionModel:
    """Wrap scalar functions of x (shape ``(...)``) into a 1D model."""

    def b(x):
        return np.asarray(drift(x[..., 0]), dtype=float)[..., None] + 0.0 * x

    def s(x):
        return (np.asarray(sigma(x[..., 0]), dtype=float) + 0.0 * x[..., 0])[..., None, None]

    jac = None
    if drift_prime is not None:
        def jac(x):
            return (np.asarray(drift_prime(x[..., 0]), dtype=float) + 0.0 * x[..., 0])[..., None, None]

    return DiffusionModel(dim=1, drift=b, diffusion=s, drift_jacobian=jac, name=name)


def zero_control(dim: int) -> ControlPolicy:
    return ControlPolicy(u=lambda t, x: np.zeros_like(x), dim=dim, bound=0.0, name="zero")


def constant_control(value: Sequence[float]) -> ControlPolicy:
    c = np.atleast_1d(np.asarray(value, dtype=float))
    return ControlPolicy(
        u=lambda t, x: np.broadcast_to(c, np.shape(x)).copy(),
        dim=c.size,
        bound=float(np.linalg.norm(c)),
        name="constant(" + ",".join(f"{v:g}" for v in c) + ")",
    )


# --------------------------------------------------------------------------- #
# Operations
# --------------------------------------------------------------------------- #


def diffusion_matrix(model: DiffusionModel, x: Array, check: bool = True) -> Array:
    """a(x) = sigma(x) sigma(x)^T, symmetrized; rejects degenerate points."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ModelEvaluationError(f"non-finite state x={x}")
    s = model.sigma(x)
    a = s @ np.swapaxes(s, -1, -2)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    if check:
        if not np.all(np.isfinite(a)):
            bad = _first_bad(x, np.isfinite(a).all(axis=(-1, -2)))
            raise ModelEvaluationError(f"non-finite diffusion matrix at x={bad}")
        lam = np.linalg.eigvalsh(a)[..., 0]
        if np.any(lam <= 0):
            bad = _first_bad(x, lam > 0)
            raise ModelEvaluationError(f"diffusion matrix not positive definite at x={bad}")
    return a


def _first_bad(x: Array, ok: Array):
    ok = np.asarray(ok)
    if ok.ndim == 0:
        return x
    idx = np.argwhere(~ok)[0]
    return x[tuple(idx)]


def control_from_subsolution(sub: Subsolution, model: DiffusionModel,
                             bound: float = np.inf) -> ControlPolicy:
    """u(t, x) = -sigma(x)^T grad_x U(t, x)."""

    def u(t, x):
        g = np.asarray(sub.gradient_x(t, x), dtype=float)
        s = model.sigma(x)
        return -np.einsum("...ji,...j->...i", s, g)

    return ControlPolicy(u=u, dim=model.dim, bound=bound, name=f"from:{sub.name}")


@dataclass(frozen=True)
class SubsolutionReport:
    min_interior_residual: float
    max_terminal_excess: float
    passed: bool
    n_interior: int
    n_terminal: int
    worst_interior_point: Optional[tuple] = None
    worst_terminal_point: Optional[tuple] = None

    @property
    def pass_(self) -> bool:
        return self.passed


def hamiltonian_residual(sub: Subsolution, model: DiffusionModel, t: float, x: Array,
                         return_scale: bool = False):
    """U_t + <b, grad U> - 1/2 |sigma^T grad U|^2 at a batch of states."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(sub.gradient_x(t, x), dtype=float)
    ut = np.asarray(sub.time_derivative(t, x), dtype=float)
    bg = np.sum(model.b(x) * g, axis=-1)
    sg = np.einsum("...ji,...j->...i", model.sigma(x), g)
    quad = 0.5 * np.sum(sg * sg, axis=-1)
    res = ut + bg - quad
    if return_scale:
        return res, np.abs(ut) + np.abs(bg) + quad
    return res


def _scaled_tol(tol: float, magnitude: Array) -> Array:
    # absolute below magnitude 1, relative above
    return tol * np.maximum(1.0, np.abs(magnitude))


def check_subsolution(sub: Subsolution, model: DiffusionModel, cost: TerminalCost,
                      sample_points: Sequence[tuple], T: float, tol: float = 1e-8
                      ) -> SubsolutionReport:
    """Check the classical subsolution inequalities at sampled ``(t, x)`` points.

    Points with ``t == T`` are terminal points (checked only for smooth costs);
    all others are interior points.
    """
    pts = list(sample_points)
    if not pts:
        raise ValueError("check_subsolution needs a nonempty sample set")

    min_res, max_exc = np.inf, -np.inf
    worst_res = worst_exc = None
    n_int = n_term = 0
    ok = True
    by_time: dict[float, list] = {}
    for t, x in pts:
        by_time.setdefault(float(t), []).append(np.atleast_1d(np.asarray(x, dtype=float)))

    for t, xs in sorted(by_time.items()):
        X = np.stack(xs)
        if t >= T:
            if not cost.smooth:
                continue
            val = np.asarray(sub.value(t, X), dtype=float)
            exc = val - cost(X)
            n_term += len(X)
            i = int(np.argmax(exc))
            if exc[i] > max_exc:
                max_exc, worst_exc = float(exc[i]), (t, X[i].tolist())
            ok &= bool(np.all(exc <= _scaled_tol(tol, val)))
        else:
            res, scale = hamiltonian_residual(sub, model, t, X, return_scale=True)
            n_int += len(X)
            i = int(np.argmin(res))
            if res[i] < min_res:
                min_res, worst_res = float(res[i]), (t, X[i].tolist())
            ok &= bool(np.all(res >= -_scaled_tol(tol, scale)))

    return SubsolutionReport(
        min_interior_residual=float(min_res) if n_int else float("nan"),
        max_terminal_excess=float(max_exc) if n_term else float("nan"),
        passed=bool(ok),
        n_interior=n_int,
        n_terminal=n_term,
        worst_interior_point=worst_res,
        worst_terminal_point=worst_exc,
    )


def sample_grid(t0: float, T: float, box: Sequence[tuple[float, float]],
                n_time: int = 21, n_space: int = 101) -> list[tuple]:
    """Tensor grid of (t, x) points over [t0, T] x box (box given per dimension)."""
    ts = np.linspace(t0, T, n_time)
    axes = [np.linspace(lo, hi, n_space) for lo, hi in box]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    return [(float(t), x) for t in ts for x in mesh]


def fd_gradient_check(sub: Subsolution, t: float, x: Array, step: float = 1e-5) -> float:
    """Max deviation between central differences of U and its declared derivatives."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.size
    g = np.asarray(sub.gradient_x(t, x), dtype=float)
    err = 0.0
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        fd = (sub.value(t, x + e) - sub.value(t, x - e)) / (2 * step)
        err = max(err, abs(float(fd) - float(g[j])))
    fd_t = (sub.value(t + step, x) - sub.value(t - step, x)) / (2 * step)
    err = max(err, abs(float(fd_t) - float(sub.time_derivative(t, x))))
    return err
