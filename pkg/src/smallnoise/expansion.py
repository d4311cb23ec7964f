"""First-order correction v1 and the predicted second moment exp(-v0/eps - v1).

v1 is the integral of 1/2 a : D^2 v0 along the characteristic

    psi' = b(psi) - sigma(psi) u(s, psi) - a(psi) grad v0(s, psi),   psi(t0) = x0.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import pde1d
from .action import OptimizerOptions, V0Field, kink_warning, solve_v0
from .model import ControlPolicy, ProblemSpec, diffusion_matrix
from .simulate import SimulationConfig, epsilon_sweep

Array = np.ndarray
GradientProvider = Callable[[float, Array], Array]
HessianProvider = Callable[[float, Array], Array]

ZERO_TOL = 1e-8


class CharacteristicError(RuntimeError):
    """Gradient provider failed mid-integration; ``partial`` holds the path so far."""

    def __init__(self, message: str, partial: "CharacteristicPath"):
        super().__init__(message)
        self.partial = partial


class BlowUpError(CharacteristicError):
    def __init__(self, time: float, partial: "CharacteristicPath"):
        super().__init__(f"characteristic blew up at t={time:.6g}", partial)
        self.time = time


class HessianError(RuntimeError):
    pass


@dataclass(frozen=True)
class CharacteristicPath:
    times: Array
    states: Array
    crossed_warning: bool = False


@dataclass(frozen=True)
class Prediction:
    epsilons: tuple
    log_Q: tuple

    @property
    def Q(self) -> dict:
        return {e: math.exp(l) for e, l in zip(self.epsilons, self.log_Q)}

    def __getitem__(self, eps: float) -> float:
        return self.Q[eps]


@dataclass(frozen=True)
class ExpansionResult:
    v0: float
    v1: float
    characteristic: CharacteristicPath
    accumulator: Array
    integrand: Array

    def predicted_Q(self, eps_list: Sequence[float]) -> Prediction:
        return predict_second_moment(self.v0, self.v1, eps_list)


# --------------------------------------------------------------------------- #
# characteristic and quadrature
# --------------------------------------------------------------------------- #


def _inside(box, x: Array) -> bool:
    if box is None:
        return True
    return all(lo <= xi <= hi for (lo, hi), xi in zip(box, x))


def integrate_characteristic(spec: ProblemSpec, control: ControlPolicy,
                             gradient: GradientProvider, steps: int = 400,
                             box: Optional[Sequence[tuple]] = None) -> CharacteristicPath:
    """Classical RK4 from (t0, x0) to T with ``steps`` equal steps."""
    if steps < 1:
        raise ValueError("steps must be positive")
    model = spec.model
    times = np.linspace(spec.t0, spec.T, steps + 1)
    h = (spec.T - spec.t0) / steps
    states = np.empty((steps + 1, spec.dim))
    states[0] = spec.x0
    crossed = not _inside(box, spec.x0)

    def field_at(t, x):
        X = x[None, :]
        a = diffusion_matrix(model, X)[0]
        u = np.asarray(control(t, X), dtype=float)[0]
        return model.b(X)[0] - model.sigma(X)[0] @ u - a @ np.asarray(gradient(t, x), dtype=float)

    for k in range(steps):
        t, x = times[k], states[k]
        try:
            k1 = field_at(t, x)
            k2 = field_at(t + h / 2, x + h / 2 * k1)
            k3 = field_at(t + h / 2, x + h / 2 * k2)
            k4 = field_at(t + h, x + h * k3)
        except Exception as exc:  # noqa: BLE001 - re-raised with the partial path
            partial = CharacteristicPath(times[:k + 1].copy(), states[:k + 1].copy(), crossed)
            raise CharacteristicError(f"gradient provider failed near t={t:.6g}: {exc}", partial) from exc
        nxt = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(nxt)):
            raise BlowUpError(float(times[k + 1]),
                              CharacteristicPath(times[:k + 1].copy(), states[:k + 1].copy(), crossed))
        states[k + 1] = nxt
        crossed = crossed or not _inside(box, nxt)
    return CharacteristicPath(times, states, bool(crossed))


def trace_integrand(spec: ProblemSpec, hessian: HessianProvider, path: CharacteristicPath) -> Array:
    """1/2 a(psi) : D^2 v0(s, psi) at every node of the characteristic."""
    out = np.empty(len(path.times))
    a = diffusion_matrix(spec.model, path.states)
    for k, (t, x) in enumerate(zip(path.times, path.states)):
        try:
            H = np.atleast_2d(np.asarray(hessian(float(t), x), dtype=float))
        except Exception as exc:  # noqa: BLE001
            raise HessianError(f"Hessian failed at node {k} (t={t:.6g}, x={x.tolist()}): {exc}") from exc
        out[k] = 0.5 * float(np.sum(a[k] * H))
    return out


def transport_accumulator(times: Array, integrand: Array) -> Array:
    """A(s_k) = int_{s_k}^T integrand by the trapezoid rule, so A(t0) = v1 and A(T) = 0."""
    seg = 0.5 * np.diff(times) * (integrand[:-1] + integrand[1:])
    acc = np.zeros(len(times))
    acc[:-1] = np.cumsum(seg[::-1])[::-1]
    return acc


def compute_v1(spec: ProblemSpec, control: ControlPolicy, hessian: HessianProvider,
               characteristic: CharacteristicPath) -> float:
    if characteristic.times[-1] < spec.T - 1e-12:
        raise ValueError("characteristic does not reach T")
    f = trace_integrand(spec, hessian, characteristic)
    return float(transport_accumulator(characteristic.times, f)[0])


def predict_second_moment(v0: float, v1: float, eps_list: Sequence[float]) -> Prediction:
    """Q~(eps) = exp(-v0/eps - v1), kept in log form."""
    if not (math.isfinite(v0) and math.isfinite(v1)):
        raise ValueError("v0 and v1 must be finite")
    eps = tuple(float(e) for e in eps_list)
    if any(e <= 0 for e in eps):
        raise ValueError("epsilons must be positive")
    return Prediction(eps, tuple(-v0 / e - v1 for e in eps))


# --------------------------------------------------------------------------- #
# end-to-end expansion
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ExpansionOptions:
    steps: int = 400
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    box: Optional[tuple] = None


def expand(spec: ProblemSpec, control: ControlPolicy, options: ExpansionOptions = ExpansionOptions(),
           gradient: Optional[GradientProvider] = None, hessian: Optional[HessianProvider] = None,
           v0: Optional[float] = None) -> ExpansionResult:
    """v0 and v1 at (t0, x0). Providers default to finite differences of solve_v0."""
    if not spec.cost.smooth:
        raise ValueError("the expansion needs a smooth terminal cost")
    fld = None
    if gradient is None or hessian is None:
        fld = V0Field(spec, control, options.optimizer)
        gradient = gradient or fld.gradient
        hessian = hessian or fld.hessian
    if v0 is None:
        v0 = fld.value(spec.t0, spec.x0) if fld is not None else solve_v0(spec, control, options.optimizer).value
    path = integrate_characteristic(spec, control, gradient, options.steps, options.box)
    f = trace_integrand(spec, hessian, path)
    acc = transport_accumulator(path.times, f)
    return ExpansionResult(float(v0), float(acc[0]), path, acc, f)


# --------------------------------------------------------------------------- #
# report
# --------------------------------------------------------------------------- #

REPORT_COLUMNS = ("eps", "mc_rate", "mc_se", "pde_psi", "expansion_v0_plus_eps_v1", "residual",
                  "order_estimate_running", "v1_sign_flag")


def v1_sign_flag(v0: float, v1: float) -> str:
    """'competing' marks v0 > 0 with v1 < 0: the correction works against the rate."""
    if abs(v1) <= ZERO_TOL:
        return "zero"
    if v0 > 0 and v1 < 0:
        return "competing"
    return "positive" if v1 > 0 else "negative"


def fitted_order(eps: Sequence[float], residuals: Sequence[float]) -> float:
    """Least-squares slope of log|r| against log eps (NaN with fewer than two usable rows)."""
    e = np.asarray(eps, dtype=float)
    r = np.abs(np.asarray(residuals, dtype=float))
    ok = np.isfinite(r) & (r > 0) & (e > 0)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(e[ok]), np.log(r[ok]), 1)[0])


@dataclass
class ExpansionReport:
    rows: list
    v0: Optional[float] = None
    v1: Optional[float] = None
    notices: list = field(default_factory=list)

    @property
    def order(self) -> float:
        eps = [r["eps"] for r in self.rows]
        res = [r["residual"] for r in self.rows]
        return fitted_order(eps, res)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            write_report_csv(fh, self.rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, float) and math.isnan(v):
        return ""
    return repr(float(v))


def write_report_csv(fh, rows) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in REPORT_COLUMNS])


def expansion_report(spec: ProblemSpec, control: ControlPolicy, eps_list: Sequence[float], *,
                     monte_carlo: bool = True, pde: bool = True, expansion: bool = True,
                     sim_config=None, expansion_options: ExpansionOptions = ExpansionOptions(),
                     pde_grid: Optional[Mapping] = None, workers: int = 1,
                     gradient: Optional[GradientProvider] = None,
                     hessian: Optional[HessianProvider] = None) -> ExpansionReport:
    """Per-eps comparison of Monte Carlo, PDE and expansion decay rates."""
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ValueError("empty epsilon list")
    report = ExpansionReport(rows=[])
    smooth = spec.cost.smooth
    res = None
    if expansion and smooth:
        res = expand(spec, control, expansion_options, gradient=gradient, hessian=hessian)
        report.v0, report.v1 = res.v0, res.v1
        if res.characteristic.crossed_warning:
            report.notices.append("characteristic left the declared region box")
        if gradient is None:
            msg = kink_warning(spec, control, expansion_options.optimizer)
            if msg:
                report.notices.append(msg)
    elif not smooth:
        report.notices.append("stopped cost: expansion and PDE columns unavailable")
    do_pde = pde and smooth and spec.dim == 1
    if pde and smooth and spec.dim != 1:
        report.notices.append("PDE column omitted: the oracle is one-dimensional")

    mc_rows = {}
    if monte_carlo:
        cfg = sim_config or SimulationConfig()
        for i, row in enumerate(epsilon_sweep(spec, control, cfg, eps_list, workers=workers)):
            mc_rows[i] = row

    eps_seen, res_seen = [], []
    for i, eps in enumerate(eps_list):
        row = {"eps": eps, "v1_sign_flag": "unavailable"}
        if i in mc_rows:
            b = mc_rows[i].batch
            if b is not None and mc_rows[i].error is None:
                row["mc_rate"] = b.minus_eps_log_Q
                row["mc_se"] = b.se_minus_eps_log_Q
            else:
                row["mc_rate"] = math.nan
                report.notices.append(f"Monte Carlo failed at eps={eps:g}: {mc_rows[i].error}")
        if do_pde:
            s_eps = replace(spec, epsilon=eps)
            sol = pde1d.solve_psi(s_eps, control, _grid_for(s_eps, pde_grid))
            row["pde_psi"] = sol.at(spec.t0, float(spec.x0[0]))
        if res is not None:
            pred = res.v0 + eps * res.v1
            row["expansion_v0_plus_eps_v1"] = pred
            row["v1_sign_flag"] = v1_sign_flag(res.v0, res.v1)
            if "pde_psi" in row:
                row["residual"] = row["pde_psi"] - pred
                eps_seen.append(eps)
                res_seen.append(row["residual"])
                row["order_estimate_running"] = fitted_order(eps_seen, res_seen)
        report.rows.append(row)
    return report


def _grid_for(spec: ProblemSpec, opts: Optional[Mapping]):
    opts = dict(opts or {})
    return pde1d.default_grid(spec, nx=int(opts.get("nx", 801)), nt=int(opts.get("nt", 4000)))
