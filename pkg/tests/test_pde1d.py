import math
from dataclasses import replace

import numpy as np
import pytest

from helpers import sub_control, zero
from oracle_values import OU_PSI_ZERO_EPS0_1, OU_PSI_ZERO_EPS0_5, OU_V0_ZERO
from smallnoise import pde1d
from smallnoise.action import solve_v0
from smallnoise.catalog import builtin_problem
from smallnoise.model import ProblemSpec, TerminalCost, constant_control, scalar_model

SMALL = dict(nx=201, nt=800)


def ou(eps=0.25, **kw):
    return builtin_problem("ou_quadratic", {"epsilon": eps, **kw})


def test_grid_validation_and_refinement():
    with pytest.raises(ValueError):
        pde1d.Grid1D(0, 1, nx=2)
    with pytest.raises(ValueError):
        pde1d.Grid1D(1, 0)
    g = pde1d.Grid1D(-1, 1, 11, 10).refined()
    assert (g.nx, g.nt) == (21, 20) and g.dx == pytest.approx(0.1)
    assert g.interior_third() == pytest.approx((-1 / 3, 1 / 3))


def test_rejects_unsupported_problems():
    with pytest.raises(ValueError):
        pde1d.solve_psi(builtin_problem("rest_point_exit").spec, constant_control([0.0]))


def test_zero_cost_zero_control_is_zero():
    m = scalar_model(lambda x: -x, lambda x: 1 + 0 * x)
    spec = ProblemSpec(m, TerminalCost(h=lambda x: 0 * x[..., 0]), 0.0, 1.0, [0.0], 0.3)
    sol = pde1d.solve_psi(spec, constant_control([0.0]), pde1d.default_grid(spec, **SMALL))
    assert np.max(np.abs(sol.values)) < 1e-12


def test_linear_gaussian_constant_control_exact():
    # -eps log Q does not depend on eps here: Psi(t0, x) = v0_c(x)
    p = builtin_problem("linear_gaussian", {"epsilon": 0.5})
    c = -0.4
    sol = pde1d.solve_psi(p.spec, constant_control([c]))
    for x in (-0.5, 0.0, 0.7):
        assert sol.at(0.0, x) == pytest.approx(p.reference["v0_constant_control"](c, 0.0, x), abs=1e-4)


@pytest.mark.parametrize("eps,exact", [(0.5, OU_PSI_ZERO_EPS0_5), (0.1, OU_PSI_ZERO_EPS0_1)])
def test_ou_gaussian_oracle(eps, exact):
    p = ou(eps)
    assert pde1d.solve_psi(p.spec, zero(p)).at(0.0, 1.0) == pytest.approx(exact, abs=1e-5)


def test_ou_riccati_oracle_under_subsolution_control():
    p = ou(0.25)
    r = p.reference["riccati"](p.reference["subsolution_gain"])
    psi = pde1d.solve_psi(p.spec, sub_control(p)).at(0.0, 1.0)
    assert psi == pytest.approx(r["v0"] + 0.25 * r["v1"], abs=1e-4)


def test_ou_profile_against_closed_form():
    p = ou(0.5)
    sol = pde1d.solve_psi(p.spec, zero(p))
    xs = sol.grid.x[sol.interior_mask()]
    exact = np.array([p.reference["psi_zero_control"](0.5, 0.0, x) for x in xs])
    assert np.max(np.abs(sol.initial_slice()[sol.interior_mask()] - exact)) < 1e-4


@pytest.mark.parametrize("eps", [0.5, 0.25])
def test_phi_matches_psi(eps):
    p = ou(eps)
    psi = pde1d.solve_psi(p.spec, zero(p))
    phi = pde1d.solve_phi(p.spec, zero(p))
    m = psi.interior_mask()
    assert np.max(np.abs(pde1d.phi_to_psi(phi)[:, m] - psi.values[:, m])) < 1e-3
    with pytest.raises(ValueError):
        pde1d.phi_to_psi(psi)


def test_phi_underflow():
    m = scalar_model(lambda x: 0 * x, lambda x: 1 + 0 * x)
    spec = ProblemSpec(m, TerminalCost(h=lambda x: 1000 + 0 * x[..., 0]), 0.0, 1.0, [0.0], 0.5)
    with pytest.raises(pde1d.UnderflowError):
        pde1d.solve_phi(spec, constant_control([0.0]), pde1d.default_grid(spec, **SMALL))


def test_cfl_refinement_and_failure():
    m = scalar_model(lambda x: -20 * x, lambda x: 1 + 0 * x)
    spec = ProblemSpec(m, TerminalCost(h=lambda x: 0.5 * x[..., 0] ** 2), 0.0, 1.0, [0.0], 0.25)
    sol = pde1d.solve_psi(spec, constant_control([0.0]), pde1d.Grid1D(-3, 3, 201, 1000))
    assert sol.grid.nt > 1000  # refined automatically
    fast = scalar_model(lambda x: -1e5 * x, lambda x: 1 + 0 * x)
    spec = replace(spec, model=fast)
    with pytest.raises(pde1d.CFLError):
        pde1d.solve_psi(spec, constant_control([0.0]), pde1d.Grid1D(-3, 3, 201, 1))


@pytest.mark.parametrize("name", ["linear_gaussian", "ou_quadratic"])
def test_max_principle(name):
    p = builtin_problem(name, {"epsilon": 0.5})
    for ctl in (zero(p), sub_control(p)):
        sol = pde1d.solve_psi(p.spec, ctl, pde1d.default_grid(p.spec, **SMALL))
        lower, upper = pde1d.max_principle_bounds(p.spec, ctl, sol)
        assert np.all(sol.values >= lower[:, None] - 1e-8)
        assert np.all(sol.values <= upper + 1e-8)
        if name == "linear_gaussian":
            # h = x is unbounded below, and so is Psi
            assert np.all(lower == -np.inf)
        else:
            assert np.all(np.isfinite(lower))


def test_eps_limit_monotone():
    p = ou()
    v0 = pde1d.solve_v0_hjb(p.spec, zero(p))
    xs = np.linspace(-1.5, 1.5, 13)
    gaps = []
    for eps in (0.4, 0.2, 0.1):
        s = replace(p.spec, epsilon=eps)
        sol = pde1d.solve_psi(s, zero(p), v0.grid)
        gaps.append(max(abs(sol.at(0.0, x) - v0.at(0.0, x)) for x in xs))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 0.5 * gaps[0]


def test_v0_hjb_exact_and_matches_action():
    p = ou()
    v0 = pde1d.solve_v0_hjb(p.spec, zero(p))
    assert v0.kind is pde1d.SolutionKind.V0
    assert v0.at(0.0, 1.0) == pytest.approx(OU_V0_ZERO, abs=1e-5)
    ctl = sub_control(p)
    hjb = pde1d.solve_v0_hjb(p.spec, ctl)
    for x in (-1.0, 0.5, 1.5):
        act = solve_v0(replace(p.spec, x0=[x]), ctl).value
        assert hjb.at(0.0, x) == pytest.approx(act, abs=1e-2)


def test_grid_convergence():
    p = ou(0.5)
    g = pde1d.default_grid(p.spec, nx=101, nt=400)
    vals = []
    for _ in range(3):
        vals.append(pde1d.solve_psi(p.spec, zero(p), g).at(0.0, 1.0))
        g = g.refined()
    assert abs(vals[1] - vals[0]) >= 2 * abs(vals[2] - vals[1])
    assert abs(vals[2] - OU_PSI_ZERO_EPS0_5) < abs(vals[0] - OU_PSI_ZERO_EPS0_5)


def test_interpolation_and_csv(tmp_path):
    p = ou(0.5)
    sol = pde1d.solve_psi(p.spec, zero(p), pde1d.default_grid(p.spec, nx=41, nt=20))
    x = sol.grid.x[7]
    assert sol.at(0.0, x) == pytest.approx(sol.values[0, 7])
    with pytest.raises(ValueError):
        sol.at(0.0, sol.grid.x_max + 1)
    out = tmp_path / "psi.csv"
    sol.to_csv(out, time_stride=10)
    lines = out.read_text().splitlines()
    n_rows = len(range(0, len(sol.times), 10)) * 41
    assert lines[0] == "t,x,value" and len(lines) == 1 + n_rows
    t, xx, v = map(float, lines[1].split(","))
    assert (t, xx) == (0.0, sol.grid.x_min) and math.isclose(v, sol.values[0, 0])
