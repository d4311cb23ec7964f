import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import sub_control, zero
from smallnoise.catalog import builtin_problem
from smallnoise.model import ProblemSpec, TerminalCost, constant_control, scalar_model
from smallnoise.simulate import (
    EstimatorBatch,
    MergeError,
    Provenance,
    SampleError,
    SimulationConfig,
    epsilon_sweep,
    merge_batches,
    run_estimator,
    second_moment_direct,
    simulate_is_path,
    time_grid,
)

PROV = Provenance("p", "c", "is", 0.5, 1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        SimulationConfig(dt=0)
    with pytest.raises(ValueError):
        SimulationConfig(n_samples=0)
    with pytest.raises(ValueError):
        SimulationConfig(seed=-1)


def test_time_grid():
    g = time_grid(0.0, 1.0, 0.3)
    assert g[-1] == 1.0 and len(g) == 5
    assert np.allclose(np.diff(g)[:-1], 0.3)
    assert time_grid(1.0, 1.0, 0.1).tolist() == [1.0]
    with pytest.raises(ValueError):
        time_grid(0.0, 0.1, 0.2)


def test_single_path_weight_formula():
    # constant u: log w = -u^2 T / (2 eps) - u W_T / sqrt(eps)
    p = builtin_problem("linear_gaussian", {"epsilon": 0.5})
    xi = np.random.default_rng(0).standard_normal((100, 1))
    cfg = SimulationConfig(dt=0.01)
    s = simulate_is_path(p.spec, constant_control([0.7]), cfg, xi)
    W = math.sqrt(0.01) * xi.sum()
    assert s.log_weight == pytest.approx(-0.49 / 1.0 - 0.7 * W / math.sqrt(0.5), rel=1e-12)
    assert s.terminal_state[0] == pytest.approx(0.7 + math.sqrt(0.5) * W, rel=1e-12)


def test_single_path_short_noise_rejected():
    p = builtin_problem("linear_gaussian")
    with pytest.raises(ValueError):
        simulate_is_path(p.spec, zero(p), SimulationConfig(dt=0.1), np.zeros((3, 1)))


def test_empty_horizon_gives_deterministic_payoff():
    p = builtin_problem("linear_gaussian", {"t0": 1.0, "x0": 0.3})
    b = run_estimator(p.spec, zero(p), SimulationConfig(n_samples=10))
    assert b.mean_gamma == pytest.approx(math.exp(-0.3 / 0.25))
    assert b.variance == pytest.approx(0.0, abs=1e-15)


# --------------------------------------------------------------------------- #
# batches
# --------------------------------------------------------------------------- #

logs = st.lists(st.floats(-800, 800, allow_nan=False), min_size=1, max_size=40)


@given(logs, logs)
def test_merge_matches_pooled(a, b):
    m = merge_batches(EstimatorBatch.from_log_payoffs(a, PROV), EstimatorBatch.from_log_payoffs(b, PROV))
    pooled = EstimatorBatch.from_log_payoffs(a + b, PROV)
    assert m.n == pooled.n
    assert m.log_mean == pytest.approx(pooled.log_mean, rel=1e-12, abs=1e-12)
    assert m.log_second_moment == pytest.approx(pooled.log_second_moment, rel=1e-12, abs=1e-12)


@given(logs, logs, logs)
def test_merge_associative_and_commutative(a, b, c):
    A, B, C = (EstimatorBatch.from_log_payoffs(v, PROV) for v in (a, b, c))
    left = merge_batches(merge_batches(A, B), C)
    right = merge_batches(A, merge_batches(B, C))
    swapped = merge_batches(C, merge_batches(B, A))
    for other in (right, swapped):
        assert left.log_mean == pytest.approx(other.log_mean, rel=1e-12, abs=1e-12)
        assert left.n == other.n


def test_merge_identity_and_mismatch():
    A = EstimatorBatch.from_log_payoffs([0.0, 1.0], PROV)
    assert merge_batches(EstimatorBatch.empty(), A) is A
    other = EstimatorBatch.from_log_payoffs([0.0], replace(PROV, epsilon=0.1))
    with pytest.raises(MergeError):
        merge_batches(A, other)


def test_extreme_log_payoffs_do_not_overflow():
    b = EstimatorBatch.from_log_payoffs([2000.0, 2000.0 + math.log(3)], PROV)
    assert b.log_mean == pytest.approx(2000 + math.log(2))
    assert math.isfinite(b.minus_eps_log_Q)


def test_degenerate_batch():
    b = EstimatorBatch.from_log_payoffs([-np.inf] * 5, PROV)
    assert b.degenerate and b.mean_gamma == 0.0 and b.n_zero == 5
    rec = b.to_record()
    assert rec["degenerate_flag"] == 1


def test_nan_payoff_rejected():
    with pytest.raises(SampleError):
        EstimatorBatch.from_log_payoffs([0.0, np.nan], PROV)


def test_record_fields():
    p = builtin_problem("ou_quadratic")
    b = run_estimator(p.spec, zero(p), SimulationConfig(n_samples=50, seed=3))
    assert list(b.to_record()) == ["problem", "control", "estimator", "eps", "dt", "n", "theta_hat",
                                   "se_theta", "Q_hat", "se_Q", "rel_err", "minus_eps_logQ",
                                   "degenerate_flag", "seed"]


# --------------------------------------------------------------------------- #
# estimator properties
# --------------------------------------------------------------------------- #


@pytest.mark.parametrize("workers", [2, 5])
def test_determinism_across_workers(workers):
    p = builtin_problem("ou_quadratic")
    cfg = SimulationConfig(dt=1e-2, n_samples=9000, seed=11)
    a = run_estimator(p.spec, sub_control(p), cfg)
    b = run_estimator(p.spec, sub_control(p), cfg, workers=workers)
    assert a == b


def test_sample_ranges_merge_to_full_run():
    p = builtin_problem("ou_quadratic")
    cfg = SimulationConfig(dt=1e-2, n_samples=9000, seed=4)
    full = run_estimator(p.spec, zero(p), cfg)
    parts = [run_estimator(p.spec, zero(p), cfg, sample_range=r) for r in ((0, 5000), (5000, 9000))]
    m = merge_batches(*parts)
    assert m.n == full.n
    assert m.mean_gamma == pytest.approx(full.mean_gamma, rel=1e-12)


@settings(max_examples=6, deadline=None)
@given(st.floats(-2, 2), st.floats(0.2, 1.0))
def test_weight_martingale(u, eps):
    # with h = 0 the payoff is the likelihood ratio, whose mean is 1
    m = scalar_model(lambda x: -x, lambda x: 1 + 0 * x)
    spec = ProblemSpec(m, TerminalCost(h=lambda x: 0 * x[..., 0]), 0.0, 1.0, [0.0], eps)
    b = run_estimator(spec, constant_control([u]), SimulationConfig(dt=1e-2, n_samples=20000, seed=1))
    assert abs(b.mean_gamma - 1) <= 3 * b.std_error_mean + 1e-12


@pytest.mark.parametrize("name", ["linear_gaussian", "ou_quadratic"])
def test_jensen(name):
    p = builtin_problem(name)
    for ctl in (zero(p), sub_control(p)):
        b = run_estimator(p.spec, ctl, SimulationConfig(dt=1e-2, n_samples=2000, seed=2))
        assert b.second_moment + 3 * b.se_second_moment >= b.mean_gamma**2 * (1 - 1e-12)


def test_zero_variance_certificate():
    p = builtin_problem("linear_gaussian")
    b = run_estimator(p.spec, constant_control([-1.0]), SimulationConfig(n_samples=2000, seed=5))
    assert b.coefficient_of_variation <= 0.02


def test_ou_zero_control_unbiased_small():
    p = builtin_problem("ou_quadratic", {"epsilon": 0.5})
    b = run_estimator(p.spec, zero(p), SimulationConfig(dt=1e-2, n_samples=20000, seed=8), workers=2)
    # dt = 1e-2 bias is ~1e-3 relative; well inside 3 SE at this n
    assert abs(b.mean_gamma - p.reference["theta"](0.5)) <= 3 * b.std_error_mean


def test_direct_estimator_matches_closed_form_q():
    # constant control on linear_gaussian: log Q = -v0(c) / eps exactly.
    # The direct payoff is lognormal with log-variance 4 / eps, so keep eps large.
    p = builtin_problem("linear_gaussian", {"epsilon": 2.0})
    c = -0.8
    d = second_moment_direct(p.spec, constant_control([c]), SimulationConfig(dt=1e-2, n_samples=40000, seed=9))
    exact = math.exp(p.reference["log_Q_constant_control"](c, 2.0))
    assert abs(d.mean_gamma - exact) <= 3 * d.std_error_mean


def test_stopped_problem_standard_mc_small_eps_degenerate():
    p = builtin_problem("rest_point_exit", {"epsilon": 0.02, "T": 0.5})
    b = run_estimator(p.spec, zero(p), SimulationConfig(dt=1e-2, n_samples=500))
    assert b.degenerate
    with pytest.raises(ValueError):
        run_estimator(p.spec, zero(p), SimulationConfig(stopped=False))


def test_stopped_exit_reporting():
    p = builtin_problem("rest_point_exit", {"epsilon": 0.25})
    xi = np.full((2000, 1), 3.0)
    s = simulate_is_path(p.spec, zero(p), SimulationConfig(), xi)
    assert s.exit_time is not None and s.exit_time < p.spec.T
    assert s.exit_class == 1


def test_epsilon_sweep():
    p = builtin_problem("ou_quadratic")
    rows = epsilon_sweep(p.spec, zero(p), SimulationConfig(dt=1e-2, n_samples=500), [0.5, 0.25])
    assert [r.epsilon for r in rows] == [0.5, 0.25] and all(r.ok for r in rows)
    with pytest.raises(ValueError, match="empty epsilon list"):
        epsilon_sweep(p.spec, zero(p), SimulationConfig(), [])


@pytest.mark.slow
def test_exit_problem_degrades_with_horizon():
    # once most paths exit (T >= 2), the reversed-potential scheme degrades as T grows
    rel, se = [], []
    for T in (2.0, 5.0, 10.0):
        p = builtin_problem("rest_point_exit", {"T": T, "epsilon": 0.25})
        b = run_estimator(p.spec, sub_control(p), SimulationConfig(dt=5e-3, n_samples=20000, seed=1), workers=4)
        rel.append(b.relative_error_per_sample)
        se.append(b.se_relative_error)
    for k in range(2):
        assert rel[k + 1] - rel[k] > 3 * math.hypot(se[k], se[k + 1])
