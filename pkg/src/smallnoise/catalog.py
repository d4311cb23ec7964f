"""Built-in one-dimensional test problems with closed-form reference values."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .model import (
    CostKind,
    ProblemSpec,
    Region,
    Subsolution,
    TerminalCost,
    scalar_model,
)


class CatalogError(KeyError):
    pass


@dataclass(frozen=True)
class BuiltinProblem:
    spec: ProblemSpec
    subsolution: Optional[Subsolution]
    reference: Mapping[str, Any] = field(default_factory=dict)
    box: tuple = ((-5.0, 5.0),)

    def __iter__(self):
        # allows ``spec, sub, ref = builtin_problem(...)``
        return iter((self.spec, self.subsolution, self.reference))


def _take(params: Mapping[str, Any], defaults: Mapping[str, Any], name: str) -> dict:
    unknown = set(params) - set(defaults)
    if unknown:
        raise CatalogError(f"unknown parameter(s) for {name}: {sorted(unknown)}; "
                           f"accepted: {sorted(defaults)}")
    out = dict(defaults)
    out.update(params)
    return {k: (float(v) if isinstance(v, (int, float)) else v) for k, v in out.items()}


def _var_factor(gamma: float, tau):
    """(1 - exp(-2 gamma tau)) / (2 gamma), with the gamma -> 0 limit."""
    tau = np.asarray(tau, dtype=float)
    if gamma == 0.0:
        return tau
    return -np.expm1(-2.0 * gamma * tau) / (2.0 * gamma)


# --------------------------------------------------------------------------- #
# linear_gaussian: b = mu, sigma = s, h(x) = kappa x
# --------------------------------------------------------------------------- #


def _linear_gaussian(p: dict) -> BuiltinProblem:
    mu, s, kappa, T, t0 = p["mu"], p["s"], p["kappa"], p["T"], p["t0"]
    if s <= 0:
        raise ValueError("linear_gaussian needs s > 0")
    model = scalar_model(lambda x: mu + 0.0 * x, lambda x: s + 0.0 * x,
                         name="linear_gaussian", drift_prime=lambda x: 0.0 * x)
    cost = TerminalCost(h=lambda x: kappa * x[..., 0])
    spec = ProblemSpec(model, cost, t0=t0, T=T, x0=[p["x0"]], epsilon=p["epsilon"],
                       name="linear_gaussian")

    def G(t, x):
        x = np.asarray(x, dtype=float)[..., 0]
        tau = T - t
        return kappa * (x + mu * tau) - 0.5 * kappa**2 * s**2 * tau

    sub = Subsolution(
        value=G,
        gradient_x=lambda t, x: kappa + 0.0 * np.asarray(x, dtype=float),
        time_derivative=lambda t, x: (-kappa * mu + 0.5 * kappa**2 * s**2)
        + 0.0 * np.asarray(x, dtype=float)[..., 0],
        hessian_x=lambda t, x: 0.0 * np.asarray(x, dtype=float)[..., None],
        name="G",
    )

    x0, tau0 = p["x0"], T - t0

    def log_theta(eps, t=t0, x=x0):
        tau = T - t
        return (-kappa * (x + mu * tau) + 0.5 * kappa**2 * s**2 * tau) / eps

    def v0_constant(c, t=t0, x=x0):
        # exact rate -eps log Q under the constant control c; also Psi^eps (v1 = 0)
        tau = T - t
        return 2 * kappa * (x + (mu - s * c) * tau) - 2 * kappa**2 * s**2 * tau - c**2 * tau

    ref = {
        "theta": lambda eps, t=t0, x=x0: math.exp(log_theta(eps, t, x)),
        "log_theta": log_theta,
        "G": G(t0, np.array([x0])),
        "G_fn": G,
        "optimal_control": -s * kappa,
        "v0_constant_control": v0_constant,
        "log_Q_constant_control": lambda c, eps, t=t0, x=x0: -v0_constant(c, t, x) / eps,
        "horizon": tau0,
    }
    return BuiltinProblem(spec, sub, ref, box=((x0 - 5.0, x0 + 5.0),))


# --------------------------------------------------------------------------- #
# ou_quadratic: b = -gamma x, sigma = 1, h(x) = c x^2 / 2
# --------------------------------------------------------------------------- #


def _ou_quadratic(p: dict) -> BuiltinProblem:
    gamma, c, T, t0, lam = p["gamma"], p["c"], p["T"], p["t0"], p["sub_scale"]
    if c < 0:
        raise ValueError("ou_quadratic needs c >= 0")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("ou_quadratic sub_scale must lie in [0, 1]")
    model = scalar_model(lambda x: -gamma * x, lambda x: 1.0 + 0.0 * x,
                         name="ou_quadratic", drift_prime=lambda x: -gamma + 0.0 * x)
    cost = TerminalCost(h=lambda x: 0.5 * c * x[..., 0] ** 2)
    spec = ProblemSpec(model, cost, t0=t0, T=T, x0=[p["x0"]], epsilon=p["epsilon"],
                       name="ou_quadratic")

    def p_coef(t):
        # G(t, x) = p(t) x^2 / 2 solves the HJB with p(T) = c
        tau = T - np.asarray(t, dtype=float)
        return c * np.exp(-2 * gamma * tau) / (1.0 + c * _var_factor(gamma, tau))

    def dp_dt(t):
        pc = p_coef(t)
        return 2 * gamma * pc + pc**2

    def G(t, x):
        return 0.5 * p_coef(t) * np.asarray(x, dtype=float)[..., 0] ** 2

    sub = Subsolution(
        value=lambda t, x: lam * G(t, x),
        gradient_x=lambda t, x: lam * p_coef(t) * np.asarray(x, dtype=float),
        time_derivative=lambda t, x: 0.5 * lam * dp_dt(t) * np.asarray(x, dtype=float)[..., 0] ** 2,
        hessian_x=lambda t, x: lam * p_coef(t) + 0.0 * np.asarray(x, dtype=float)[..., None],
        name="G" if lam == 1.0 else f"{lam:g}*G",
    )

    x0 = p["x0"]

    def log_theta(eps, t=t0, x=x0):
        tau = T - t
        m2 = math.exp(-2 * gamma * tau)
        v = float(_var_factor(gamma, tau))
        return -0.5 * math.log1p(c * v) - c * m2 * x**2 / (2 * eps * (1 + c * v))

    def psi_zero_control(eps, t=t0, x=x0):
        # exact -eps log Q for u = 0: v0(t, x) + eps * v1(t)
        tau = T - t
        m2 = math.exp(-2 * gamma * tau)
        v = float(_var_factor(gamma, tau))
        return c * m2 * x**2 / (1 + 2 * c * v) + 0.5 * eps * math.log1p(2 * c * v)

    def v0_zero(t=t0, x=x0):
        return psi_zero_control(0.0, t, x)

    def v1_zero(t=t0):
        return 0.5 * math.log1p(2 * c * float(_var_factor(gamma, T - t)))

    ref = {
        "theta": lambda eps, t=t0, x=x0: math.exp(log_theta(eps, t, x)),
        "log_theta": log_theta,
        "G": float(G(t0, np.array([x0]))),
        "G_fn": G,
        "p": p_coef,
        "psi_zero_control": psi_zero_control,
        "v0_zero_control": v0_zero,
        "v1_zero_control": v1_zero,
        "riccati": lambda gain, t=t0, x=x0: riccati_linear_feedback(gamma, c, T, gain, t, x),
        "subsolution_gain": lambda t: lam * p_coef(t),
    }
    return BuiltinProblem(spec, sub, ref, box=((-5.0, 5.0),))


def riccati_linear_feedback(gamma: float, c: float, T: float, gain: Callable[[float], float],
                            t: float, x: float) -> dict:
    """Exact (v0, v1) for the OU/quadratic problem under u(t, x) = -gain(t) x.

    Psi(t, x) = r(t) x^2 / 2 + eps q(t) with
    r' = 2 (gamma - k) r + r^2 + 2 k^2, r(T) = 2c;  q' = -r / 2, q(T) = 0.
    """
    def rhs(s, y):
        r, _ = y
        k = gain(s)
        return [2 * (gamma - k) * r + r**2 + 2 * k**2, -0.5 * r]

    if T == t:
        return {"v0": c * x**2, "v1": 0.0, "r": 2 * c}
    sol = solve_ivp(rhs, (T, t), [2 * c, 0.0], method="DOP853", rtol=1e-12, atol=1e-14)
    r, q = sol.y[:, -1]
    return {"v0": 0.5 * r * x**2, "v1": q, "r": r}


# --------------------------------------------------------------------------- #
# rest_point_exit: b = -V'(x), V = x^2/2, sigma = 1, exit from {V < L} before T
# --------------------------------------------------------------------------- #


def _rest_point_exit(p: dict) -> BuiltinProblem:
    L, T, t0 = p["L"], p["T"], p["t0"]
    if L <= 0:
        raise ValueError("rest_point_exit needs L > 0")
    model = scalar_model(lambda x: -x, lambda x: 1.0 + 0.0 * x,
                         name="rest_point_exit", drift_prime=lambda x: -1.0 + 0.0 * x)

    def membership(x):
        V = 0.5 * x[..., 0] ** 2
        return np.where(V >= L, Region.EXIT_TARGET, Region.INSIDE).astype(np.int8)

    cost = TerminalCost(h=lambda x: 0.0 * x[..., 0], kind=CostKind.STOPPED,
                        membership=membership)
    spec = ProblemSpec(model, cost, t0=t0, T=T, x0=[p["x0"]], epsilon=p["epsilon"],
                       name="rest_point_exit")
    # reversed-potential subsolution -2 (V - L)
    sub = Subsolution(
        value=lambda t, x: -2.0 * (0.5 * np.asarray(x, dtype=float)[..., 0] ** 2 - L),
        gradient_x=lambda t, x: -2.0 * np.asarray(x, dtype=float),
        time_derivative=lambda t, x: 0.0 * np.asarray(x, dtype=float)[..., 0],
        hessian_x=lambda t, x: -2.0 + 0.0 * np.asarray(x, dtype=float)[..., None],
        name="reversed_potential",
    )
    edge = math.sqrt(2 * L)
    ref = {"exit_level": edge, "Ubar_x0": float(sub.value(t0, np.array([p["x0"]])))}
    return BuiltinProblem(spec, sub, ref, box=((-edge, edge),))


_CATALOG = {
    "linear_gaussian": (_linear_gaussian,
                        dict(mu=0.0, s=1.0, kappa=1.0, T=1.0, t0=0.0, x0=0.0, epsilon=0.25)),
    "ou_quadratic": (_ou_quadratic,
                     dict(gamma=1.0, c=1.0, T=1.0, t0=0.0, x0=1.0, epsilon=0.25, sub_scale=1.0)),
    "rest_point_exit": (_rest_point_exit,
                        dict(L=1.0, T=2.0, t0=0.0, x0=0.0, epsilon=0.25)),
}


def available_problems() -> list[str]:
    return sorted(_CATALOG)


def builtin_problem(name: str, parameters: Optional[Mapping[str, Any]] = None) -> BuiltinProblem:
    """Look up a catalog problem by name and build it with ``parameters``."""
    try:
        factory, defaults = _CATALOG[name]
    except KeyError:
        raise CatalogError(f"unknown problem {name!r}; available: {', '.join(available_problems())}") from None
    return factory(_take(parameters or {}, defaults, name))
