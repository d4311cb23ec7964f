import math

import numpy as np
import pytest
from scipy import integrate, stats

from oracle_values import (
    LG_THETA_EPS0_5,
    OU_G,
    OU_PSI_ZERO_EPS0_25,
    OU_THETA_EPS0_25,
    OU_V0_ZERO,
    OU_V1_ZERO,
)
from smallnoise.catalog import CatalogError, available_problems, builtin_problem


def test_available():
    assert available_problems() == ["linear_gaussian", "ou_quadratic", "rest_point_exit"]


def test_unknown_name_and_parameter():
    with pytest.raises(CatalogError, match="unknown problem"):
        builtin_problem("nope")
    with pytest.raises(CatalogError, match="accepted"):
        builtin_problem("ou_quadratic", {"kappa": 1})


def test_invalid_parameters():
    with pytest.raises(ValueError):
        builtin_problem("linear_gaussian", {"s": 0})
    with pytest.raises(ValueError):
        builtin_problem("ou_quadratic", {"sub_scale": 2})
    with pytest.raises(ValueError):
        builtin_problem("rest_point_exit", {"L": -1})


def test_unpacking():
    spec, sub, ref = builtin_problem("ou_quadratic")
    assert spec.name == "ou_quadratic" and sub is not None and "theta" in ref


def test_frozen_oracles():
    lg = builtin_problem("linear_gaussian", {"epsilon": 0.5})
    assert lg.reference["theta"](0.5) == pytest.approx(LG_THETA_EPS0_5, rel=1e-12)
    ou = builtin_problem("ou_quadratic")
    r = ou.reference
    assert r["theta"](0.25) == pytest.approx(OU_THETA_EPS0_25, rel=1e-12)
    assert r["psi_zero_control"](0.25) == pytest.approx(OU_PSI_ZERO_EPS0_25, rel=1e-12)
    assert r["v0_zero_control"]() == pytest.approx(OU_V0_ZERO, rel=1e-12)
    assert r["v1_zero_control"]() == pytest.approx(OU_V1_ZERO, rel=1e-12)
    assert r["G"] == pytest.approx(OU_G, rel=1e-12)


@pytest.mark.parametrize("eps", [0.5, 0.1])
def test_ou_theta_against_quadrature(eps):
    # X_T ~ N(x0 e^{-T}, eps (1 - e^{-2T}) / 2)
    m, v = math.exp(-1), eps * (1 - math.exp(-2)) / 2
    f = lambda y: math.exp(-0.5 * y * y / eps) * stats.norm.pdf(y, m, math.sqrt(v))
    val, _ = integrate.quad(f, -10, 10, epsabs=1e-13)
    assert builtin_problem("ou_quadratic").reference["theta"](eps) == pytest.approx(val, rel=1e-9)


def test_ou_riccati_reduces_to_zero_control():
    ou = builtin_problem("ou_quadratic")
    out = ou.reference["riccati"](lambda t: 0.0)
    assert out["v0"] == pytest.approx(OU_V0_ZERO, rel=1e-9)
    assert out["v1"] == pytest.approx(OU_V1_ZERO, rel=1e-9)


def test_ou_riccati_optimal_gain_gives_2G():
    ou = builtin_problem("ou_quadratic")
    out = ou.reference["riccati"](ou.reference["subsolution_gain"])
    assert out["v0"] == pytest.approx(2 * ou.reference["G"], rel=1e-8)


def test_linear_gaussian_constant_control_rate():
    lg = builtin_problem("linear_gaussian")
    v0 = lg.reference["v0_constant_control"]
    assert v0(-1.0) == pytest.approx(2 * lg.reference["G"])
    assert v0(0.0) == pytest.approx(-2.0)
    # the optimum over constants is the optimal control
    cs = np.linspace(-3, 1, 401)
    assert cs[np.argmax([v0(c) for c in cs])] == pytest.approx(-1.0, abs=1e-2)


def test_rest_point_exit_geometry():
    p = builtin_problem("rest_point_exit", {"L": 2.0})
    assert p.reference["exit_level"] == pytest.approx(2.0)
    codes = p.spec.cost.classify(np.array([[0.0], [1.99], [2.0], [-2.5]]))
    assert codes.tolist() == [0, 0, 1, 1]
    assert p.reference["Ubar_x0"] == pytest.approx(4.0)
