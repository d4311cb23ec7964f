"""Acceptance criteria 1-8, one printed PASS/FAIL line each (see the terminal summary).

Tolerances are the published ones; nothing here is loosened to force a pass.
"""
import filecmp
import math
from dataclasses import replace

import numpy as np
import pytest
import yaml

from criteria import report
from helpers import sub_control, zero
from smallnoise import pde1d
from smallnoise.action import solve_G, solve_v0
from smallnoise.catalog import builtin_problem
from smallnoise.cli import main
from smallnoise.expansion import expansion_report
from smallnoise.model import constant_control
from smallnoise.simulate import SimulationConfig, run_estimator, second_moment_direct

pytestmark = pytest.mark.acceptance

N_BIG = 100_000
# Zero-variance batches have SE = 0 up to rounding; allow float round-off on top of 3 SE.
ROUNDOFF = 1e-12


# --------------------------------------------------------------------------- #
# 1. zero-variance optimality
# --------------------------------------------------------------------------- #


def test_criterion_1_zero_variance_optimal_control():
    problem = builtin_problem("linear_gaussian", {"mu": 0, "s": 1, "kappa": 1, "T": 1, "x0": 0})
    cfg = SimulationConfig(dt=1e-3, n_samples=10_000, seed=101)
    details, ok = [], True
    for eps in (0.5, 0.25):
        spec = replace(problem.spec, epsilon=eps)
        b = run_estimator(spec, constant_control([-1.0]), cfg)
        exact = math.exp(1 / (2 * eps))
        cv = b.coefficient_of_variation
        rel = abs(b.mean_gamma / exact - 1)
        rate = b.minus_eps_log_Q
        good = cv <= 0.02 and rel <= 1e-3 and abs(rate + 1) <= 0.01
        ok &= good
        details.append(f"eps={eps}: CV={cv:.2e} |theta/e^(1/2eps)-1|={rel:.2e} -eps logQ={rate:.6f}")
    report(1, ok, "; ".join(details))
    assert ok


def ou_euler_theta(spec, dt, gamma=1.0, c=1.0):
    """Exact E exp(-c X_N^2 / 2 eps) for the Euler chain of the OU catalog problem."""
    n = round((spec.T - spec.t0) / dt)
    a = 1 - gamma * dt
    m = a**n * spec.x0[0]
    v = spec.epsilon * dt * (1 - a ** (2 * n)) / (1 - a**2)
    k = c / spec.epsilon
    return math.exp(-k * m * m / (2 * (1 + k * v))) / math.sqrt(1 + k * v)


# --------------------------------------------------------------------------- #
# 2 and 3. unbiasedness and dual second-moment estimators
# --------------------------------------------------------------------------- #

CASES = [("linear_gaussian", "zero"), ("linear_gaussian", "subsolution"),
         ("ou_quadratic", "zero"), ("ou_quadratic", "subsolution")]


@pytest.fixture(scope="module")
def is_batches():
    cfg = SimulationConfig(dt=1e-3, n_samples=N_BIG, seed=202)
    out = {}
    for name, ctl in CASES:
        problem = builtin_problem(name, {"epsilon": 0.25})
        control = zero(problem) if ctl == "zero" else sub_control(problem)
        out[name, ctl] = (problem, control, run_estimator(problem.spec, control, cfg, workers=4))
    return out


def test_criterion_2_unbiased_under_reweighting(is_batches):
    ok, details = True, []
    for (name, ctl), (problem, _, b) in is_batches.items():
        theta = problem.reference["theta"](0.25)
        err = abs(b.mean_gamma - theta)
        bound = 3 * b.std_error_mean + ROUNDOFF * theta
        ok &= err <= bound
        details.append(f"{name}/{ctl}: |err|={err:.3g} vs 3SE+roundoff={bound:.3g}")
    if not ok:
        # the estimator targets the Euler chain; report its distance from the exact discrete value
        problem, _, b = is_batches["ou_quadratic", "subsolution"]
        gap = abs(b.mean_gamma - ou_euler_theta(problem.spec, 1e-3))
        details.append(f"ou/subsolution vs exact Euler-chain theta: |err|={gap:.3g}")
    report(2, ok, "; ".join(details))
    assert ok


def test_criterion_3_dual_second_moment(is_batches):
    cfg = SimulationConfig(dt=1e-3, n_samples=N_BIG, seed=303)
    ok, details = True, []
    for (name, ctl), (problem, control, b) in is_batches.items():
        d = second_moment_direct(problem.spec, control, cfg, workers=4)
        diff = abs(b.second_moment - d.mean_gamma)
        bound = 3 * math.hypot(b.se_second_moment, d.std_error_mean)
        ok &= diff <= bound
        details.append(f"{name}/{ctl}: Q_is={b.second_moment:.5g} Q_direct={d.mean_gamma:.5g} "
                       f"diff={diff:.3g} <= {bound:.3g}")
    report(3, ok, "; ".join(details))
    assert ok


# --------------------------------------------------------------------------- #
# 4. expansion order
# --------------------------------------------------------------------------- #


def test_criterion_4_expansion_residual_order():
    problem = builtin_problem("ou_quadratic")
    eps = [0.4, 0.2, 0.1, 0.05]
    rep = expansion_report(problem.spec, zero(problem), eps, monte_carlo=False)
    r = {row["eps"]: row["residual"] for row in rep.rows}
    slope = rep.order
    ok = slope >= 1.5 and abs(r[0.05]) < abs(r[0.4])
    report(4, ok, f"fitted slope={slope:.3f} (need >= 1.5); residuals "
                  + ", ".join(f"r({e})={r[e]:.3e}" for e in eps)
                  + f"; v0={rep.v0:.6f} v1={rep.v1:.6f}")
    assert ok


# --------------------------------------------------------------------------- #
# 5. subsolution lower bound
# --------------------------------------------------------------------------- #


def test_criterion_5_subsolution_bound():
    ok, details = True, []
    for name in ("linear_gaussian", "ou_quadratic", "rest_point_exit"):
        problem = builtin_problem(name)
        spec = problem.spec
        if not spec.cost.smooth:
            details.append(f"{name}: stopped cost, variational problems need a smooth cost (n/a)")
            continue
        v0 = solve_v0(spec, sub_control(problem))
        G = solve_G(spec)
        U = float(problem.subsolution.value(spec.t0, spec.x0[None, :])[0])
        margin = v0.value - (G.value + U)
        good = margin >= -1e-3 and v0.converged and G.converged
        ok &= good
        details.append(f"{name}: v0={v0.value:.6f} G+U={G.value + U:.6f} margin={margin:.2e}")
    report(5, ok, "; ".join(details))
    assert ok


# --------------------------------------------------------------------------- #
# 6. PDE oracle self-consistency
# --------------------------------------------------------------------------- #


def test_criterion_6_pde_self_consistency():
    ok, details = True, []
    for name in ("linear_gaussian", "ou_quadratic"):
        problem = builtin_problem(name, {"epsilon": 0.5})
        for ctl in ("zero", "subsolution"):
            control = zero(problem) if ctl == "zero" else sub_control(problem)
            psi = pde1d.solve_psi(problem.spec, control)
            phi = pde1d.solve_phi(problem.spec, control)
            m = psi.interior_mask()
            sup = float(np.max(np.abs(pde1d.phi_to_psi(phi)[:, m] - psi.values[:, m])))
            ok &= sup <= 1e-3
            details.append(f"{name}/{ctl}: sup|-eps log Phi - Psi|={sup:.2e}")
    problem = builtin_problem("ou_quadratic", {"epsilon": 0.5})
    grid = pde1d.default_grid(problem.spec, nx=201, nt=1000)
    vals = []
    for _ in range(3):
        vals.append(pde1d.solve_psi(problem.spec, zero(problem), grid).at(0.0, 1.0))
        grid = grid.refined()
    ratio = abs(vals[1] - vals[0]) / abs(vals[2] - vals[1])
    ok &= ratio >= 2
    details.append(f"grid halving increment ratio={ratio:.2f}")
    report(6, ok, "; ".join(details))
    assert ok


# --------------------------------------------------------------------------- #
# 7. degradation with the horizon for the exit problem
# --------------------------------------------------------------------------- #


def test_criterion_7_rest_point_degradation():
    cfg = SimulationConfig(dt=1e-3, n_samples=N_BIG, seed=707)
    rel, se = {}, {}
    for T in (1.0, 5.0):
        problem = builtin_problem("rest_point_exit", {"L": 1.0, "T": T, "epsilon": 0.25})
        b = run_estimator(problem.spec, sub_control(problem), cfg, workers=4)
        rel[T], se[T] = b.relative_error_per_sample, b.se_relative_error
    problem = builtin_problem("rest_point_exit", {"L": 1.0, "T": 1.0, "epsilon": 0.25})
    mc = run_estimator(problem.spec, zero(problem), cfg, workers=4)
    grows = rel[5.0] - rel[1.0] > 3 * math.hypot(se[5.0], se[1.0])
    mc_worse = mc.degenerate or mc.relative_error_per_sample > rel[1.0]
    ok = grows and mc_worse
    mc_txt = "degenerate" if mc.degenerate else f"{mc.relative_error_per_sample:.3g}"
    report(7, ok, f"reversed-potential rel_err T=1: {rel[1.0]:.3f}+-{se[1.0]:.3f}, "
                  f"T=5: {rel[5.0]:.3f}+-{se[5.0]:.3f} (growth with 3-SE separation: {grows}); "
                  f"standard MC at T=1: {mc_txt} (worse: {mc_worse})")
    assert ok


# --------------------------------------------------------------------------- #
# 8. determinism across thread counts
# --------------------------------------------------------------------------- #


def test_criterion_8_cli_determinism(tmp_path):
    cfg = {
        "problem": {"name": "ou_quadratic"},
        "control": "from_subsolution",
        "epsilons": [0.5, 0.25],
        "simulation": {"dt": 0.001, "n_samples": 20000, "seed": 88},
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    codes = [main(["estimate", "--config", str(path), "--out", str(tmp_path / f"t{k}"), "--threads", str(k)])
             for k in (1, 4)]
    same = filecmp.cmp(tmp_path / "t1" / "estimates.csv", tmp_path / "t4" / "estimates.csv", shallow=False)
    ok = codes == [0, 0] and same
    report(8, ok, f"exit codes {codes}; estimates.csv byte-identical for --threads 1 and 4: {same}")
    assert ok
