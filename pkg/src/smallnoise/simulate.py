"""Euler-Maruyama simulation under the importance-sampling measure.

Two routes to the second moment are provided: the reweighted estimator
(``run_estimator``), whose squared payoffs average to Q, and the direct
representation (``second_moment_direct``), which simulates the sign-flipped
dynamics b - sigma u under the original measure and averages
exp(-2h/eps + (1/eps) int |u|^2).

Payoffs live in log space until accumulation; batch statistics keep a log
scale plus power sums of the rescaled payoffs.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import rng as _rng
from .model import ControlPolicy, ProblemSpec, Region

Array = np.ndarray

IS = "is"
DIRECT = "direct"


class SampleError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class MergeError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    dt: float = 1e-3
    n_samples: int = 10_000
    seed: int = 0
    stopped: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.n_samples) < 1:
            raise ValueError(f"n_samples must be positive, got {self.n_samples}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class PathSample:
    terminal_state: Array
    log_weight: float
    exit_time: Optional[float] = None
    exit_class: Optional[Region] = None


def time_grid(t0: float, T: float, dt: float) -> Array:
    """Uniform grid with a final partial step; a single node when T == t0."""
    H = T - t0
    if H <= 0:
        return np.array([float(t0)])
    if dt > H * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds the horizon T - t0 = {H}")
    n = max(1, math.ceil(H / dt - 1e-9))
    times = t0 + dt * np.arange(n + 1, dtype=float)
    times[-1] = T
    return times


def _propagate(spec: ProblemSpec, control: ControlPolicy, times: Array,
               noise: Callable[[], Array], n: int, mode: str, stopped: bool):
    """Advance ``n`` paths over ``times``; return (X, logw, exit_time, exit_class)."""
    model, eps = spec.model, spec.epsilon
    sq = math.sqrt(eps)
    X = np.tile(spec.x0, (n, 1))
    logw = np.zeros(n)
    exit_time = np.full(n, np.nan)
    exit_class = np.zeros(n, dtype=np.int8)
    alive = None
    if stopped:
        cls = spec.cost.classify(X)
        out = cls != Region.INSIDE
        exit_time[out] = times[0]
        exit_class[out] = cls[out]
        alive = np.flatnonzero(~out)

    for k in range(len(times) - 1):
        t, dt = times[k], times[k + 1] - times[k]
        xi = noise()
        if stopped:
            if alive.size == 0:
                break
            Xa, xia = X[alive], xi[alive]
        else:
            Xa, xia = X, xi
        b = model.b(Xa)
        s = model.sigma(Xa)
        u = control(t, Xa)
        su = np.einsum("...ij,...j->...i", s, u)
        dW = math.sqrt(dt) * xia
        uu = np.sum(u * u, axis=-1)
        if mode == IS:
            Xn = Xa + (b + su) * dt + sq * np.einsum("...ij,...j->...i", s, dW)
            dlw = -0.5 / eps * uu * dt - np.sum(u * dW, axis=-1) / sq
        else:
            Xn = Xa + (b - su) * dt + sq * np.einsum("...ij,...j->...i", s, dW)
            dlw = uu * dt / eps
        if not (np.all(np.isfinite(Xn)) and np.all(np.isfinite(dlw))):
            raise SampleError("non-finite state or weight", k)
        if stopped:
            X[alive] = Xn
            logw[alive] += dlw
            cls = spec.cost.classify(Xn)
            gone = cls != Region.INSIDE
            if np.any(gone):
                idx = alive[gone]
                exit_time[idx] = times[k + 1]
                exit_class[idx] = cls[gone]
                alive = alive[~gone]
        else:
            X = Xn
            logw += dlw
    if stopped:
        exit_class[np.isnan(exit_time)] = -1
    return X, logw, exit_time, exit_class


def _log_payoff(spec: ProblemSpec, X: Array, logw: Array, exit_class: Array,
                stopped: bool, mode: str) -> Array:
    factor = 1.0 if mode == IS else 2.0
    lg = -factor * spec.cost(X) / spec.epsilon + logw
    if stopped:
        lg = np.where(exit_class == Region.EXIT_TARGET, lg, -np.inf)
    return lg


def _is_stopped(spec: ProblemSpec, config: SimulationConfig) -> bool:
    if spec.cost.smooth:
        return False
    if not config.stopped:
        raise ValueError("stopped-indicator costs require SimulationConfig.stopped=True")
    return True


# --------------------------------------------------------------------------- #
# single path
# --------------------------------------------------------------------------- #


def simulate_is_path(spec: ProblemSpec, control: ControlPolicy, config: SimulationConfig,
                     noise_stream: Union[np.random.Generator, Array, Callable[[], Array]]
                     ) -> PathSample:
    """One Euler-Maruyama path under the sampling measure with its log dP/dP-bar."""
    times = time_grid(spec.t0, spec.T, config.dt)
    d = spec.dim
    if isinstance(noise_stream, np.random.Generator):
        g = noise_stream
        noise = lambda: g.standard_normal((1, d))
    elif callable(noise_stream):
        noise = lambda: np.reshape(noise_stream(), (1, d))
    else:
        arr = np.asarray(noise_stream, dtype=float).reshape(-1, d)
        if len(arr) < len(times) - 1:
            raise ValueError(f"noise array has {len(arr)} steps, need {len(times) - 1}")
        it = iter(arr)
        noise = lambda: next(it)[None, :]
    stopped = _is_stopped(spec, config)
    X, logw, et, ec = _propagate(spec, control, times, noise, 1, IS, stopped)
    if stopped:
        cls = Region(int(ec[0])) if ec[0] >= 0 else None
        return PathSample(X[0], float(logw[0]),
                          None if np.isnan(et[0]) else float(et[0]), cls)
    return PathSample(X[0], float(logw[0]))


# --------------------------------------------------------------------------- #
# batch statistics
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Provenance:
    problem: str
    control: str
    estimator: str
    epsilon: float
    dt: float


@dataclass(frozen=True)
class EstimatorBatch:
    """Pooled payoff statistics.

    Payoffs are stored as ``exp(log_scale) * y`` with ``y <= 1``; ``sums[k]`` is
    the compensated sum of ``y**(k+1)`` for k = 0..3.
    """

    provenance: Optional[Provenance]
    n: int
    log_scale: float
    sums: tuple
    n_zero: int = 0
    seed: Optional[int] = None

    @classmethod
    def empty(cls, provenance: Optional[Provenance] = None) -> "EstimatorBatch":
        return cls(provenance, 0, 0.0, (0.0, 0.0, 0.0, 0.0), 0)

    @classmethod
    def from_log_payoffs(cls, log_payoffs: Array, provenance: Optional[Provenance] = None,
                         seed: Optional[int] = None) -> "EstimatorBatch":
        lg = np.asarray(log_payoffs, dtype=float).ravel()
        if np.any(np.isnan(lg)) or np.any(lg == np.inf):
            raise SampleError("payoff is NaN or +inf", -1)
        pos = lg[np.isfinite(lg)]
        n_zero = int(lg.size - pos.size)
        if pos.size == 0:
            return cls(provenance, int(lg.size), 0.0, (0.0, 0.0, 0.0, 0.0), n_zero, seed)
        shift = float(pos.max())
        y = np.exp(pos - shift)
        sums = tuple(math.fsum(y**k) for k in (1, 2, 3, 4))
        return cls(provenance, int(lg.size), shift, sums, n_zero, seed)

    # -- moments in rescaled units --
    def _m(self, k: int) -> float:
        return self.sums[k - 1] / self.n if self.n else float("nan")

    @property
    def epsilon(self) -> float:
        return self.provenance.epsilon if self.provenance else float("nan")

    @property
    def degenerate(self) -> bool:
        return self.n == 0 or self.n_zero == self.n

    @property
    def mean_gamma(self) -> float:
        if self.n == 0:
            return float("nan")
        return math.exp(self.log_scale) * self._m(1)

    @property
    def log_mean(self) -> float:
        m1 = self._m(1)
        return self.log_scale + math.log(m1) if m1 > 0 else -math.inf

    @property
    def second_moment(self) -> float:
        if self.n == 0:
            return float("nan")
        return math.exp(2 * self.log_scale) * self._m(2)

    @property
    def log_second_moment(self) -> float:
        m2 = self._m(2)
        return 2 * self.log_scale + math.log(m2) if m2 > 0 else -math.inf

    def _central2(self) -> float:
        return max(self._m(2) - self._m(1) ** 2, 0.0)

    @property
    def variance(self) -> float:
        if self.n < 2:
            return 0.0 if self.n == 1 else float("nan")
        return math.exp(2 * self.log_scale) * self._central2() * self.n / (self.n - 1)

    @property
    def std_error_mean(self) -> float:
        return math.sqrt(self.variance / self.n) if self.n else float("nan")

    @property
    def relative_error_per_sample(self) -> float:
        m1 = self._m(1)
        if not m1 > 0:
            return float("nan")
        return math.sqrt(self._central2()) / m1

    @property
    def coefficient_of_variation(self) -> float:
        m1 = self._m(1)
        if not m1 > 0:
            return float("nan")
        return math.sqrt(self.variance) / self.mean_gamma

    @property
    def se_second_moment(self) -> float:
        if self.n < 2:
            return float("nan")
        v = max(self._m(4) - self._m(2) ** 2, 0.0) / (self.n - 1)
        return math.exp(2 * self.log_scale) * math.sqrt(v)

    @property
    def minus_eps_log_Q(self) -> float:
        return -self.epsilon * self.log_second_moment

    @property
    def se_minus_eps_log_Q(self) -> float:
        m2 = self._m(2)
        if self.n < 2 or not m2 > 0:
            return float("nan")
        return self.epsilon * math.sqrt(max(self._m(4) - m2**2, 0.0) / (self.n - 1)) / m2

    @property
    def minus_eps_log_mean(self) -> float:
        return -self.epsilon * self.log_mean

    @property
    def se_relative_error(self) -> float:
        """Delta-method standard error of ``relative_error_per_sample``."""
        m1, m2, m3, m4 = (self._m(k) for k in (1, 2, 3, 4))
        if self.n < 2 or not m1 > 0:
            return float("nan")
        f = math.sqrt(max(m2 / m1**2 - 1.0, 0.0))
        if f == 0.0:
            return 0.0
        g1 = -m2 / (f * m1**3)
        g2 = 1.0 / (2 * f * m1**2)
        c11 = m2 - m1**2
        c12 = m3 - m1 * m2
        c22 = m4 - m2**2
        var = (g1 * g1 * c11 + 2 * g1 * g2 * c12 + g2 * g2 * c22) / (self.n - 1)
        return math.sqrt(max(var, 0.0))

    def to_record(self) -> dict:
        p = self.provenance
        direct = p is not None and p.estimator == DIRECT
        nan = float("nan")
        if direct:
            Q, seQ = self.mean_gamma, self.std_error_mean
            rate = -self.epsilon * self.log_mean
            theta, se_theta, rel = nan, nan, nan
        else:
            Q, seQ = self.second_moment, self.se_second_moment
            rate = self.minus_eps_log_Q
            theta, se_theta = self.mean_gamma, self.std_error_mean
            rel = self.relative_error_per_sample
        return {
            "problem": p.problem if p else "",
            "control": p.control if p else "",
            "estimator": p.estimator if p else "",
            "eps": p.epsilon if p else nan,
            "dt": p.dt if p else nan,
            "n": self.n,
            "theta_hat": theta,
            "se_theta": se_theta,
            "Q_hat": Q,
            "se_Q": seQ,
            "rel_err": rel,
            "minus_eps_logQ": rate,
            "degenerate_flag": int(self.degenerate),
            "seed": self.seed if self.seed is not None else "",
        }


def merge_batches(b1: EstimatorBatch, b2: EstimatorBatch) -> EstimatorBatch:
    """Pool two batches of the same (problem, control, estimator, eps, dt)."""
    if b1.n == 0:
        return b2
    if b2.n == 0:
        return b1
    if b1.provenance != b2.provenance:
        raise MergeError(f"cannot merge batches with provenance {b1.provenance} and {b2.provenance}")
    pos1 = b1.n_zero < b1.n
    pos2 = b2.n_zero < b2.n
    if pos1 and pos2:
        shift = max(b1.log_scale, b2.log_scale)
    else:
        shift = b1.log_scale if pos1 else b2.log_scale
    sums = []
    for k in range(4):
        parts = []
        for b, pos in ((b1, pos1), (b2, pos2)):
            if pos:
                parts.append(b.sums[k] * math.exp((k + 1) * (b.log_scale - shift)))
        sums.append(math.fsum(parts))
    seed = b1.seed if b1.seed == b2.seed else None
    return EstimatorBatch(b1.provenance, b1.n + b2.n, shift, tuple(sums),
                          b1.n_zero + b2.n_zero, seed)


# --------------------------------------------------------------------------- #
# estimators
# --------------------------------------------------------------------------- #


def _run(spec: ProblemSpec, control: ControlPolicy, config: SimulationConfig, mode: str,
         stream: tuple, sample_range: Optional[tuple], workers: int) -> EstimatorBatch:
    times = time_grid(spec.t0, spec.T, config.dt)
    stopped = _is_stopped(spec, config)
    start, stop = sample_range if sample_range is not None else (0, int(config.n_samples))

    def one_block(blk):
        block, lo, hi = blk
        noise = _rng.BlockNoise(config.seed, stream, block, lo, hi, spec.dim)
        X, logw, _, ec = _propagate(spec, control, times, noise, hi - lo, mode, stopped)
        return _log_payoff(spec, X, logw, ec, stopped, mode)

    blocks = list(_rng.block_ranges(start, stop))
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one_block, blocks))
    else:
        parts = [one_block(b) for b in blocks]
    lg = np.concatenate(parts) if parts else np.empty(0)
    prov = Provenance(spec.name, control.name, mode, float(spec.epsilon), float(config.dt))
    return EstimatorBatch.from_log_payoffs(lg, prov, seed=int(config.seed))


def run_estimator(spec: ProblemSpec, control: ControlPolicy, config: SimulationConfig, *,
                  sample_range: Optional[tuple] = None, workers: int = 1,
                  stream: tuple = (_rng.IS_STREAM, 0)) -> EstimatorBatch:
    """Importance-sampling estimate of theta; squared payoffs estimate Q."""
    return _run(spec, control, config, IS, stream, sample_range, workers)


def second_moment_direct(spec: ProblemSpec, control: ControlPolicy, config: SimulationConfig, *,
                         sample_range: Optional[tuple] = None, workers: int = 1,
                         stream: tuple = (_rng.DIRECT_STREAM, 0)) -> EstimatorBatch:
    """Estimate Q from the sign-flipped dynamics; the batch mean is Q-hat."""
    return _run(spec, control, config, DIRECT, stream, sample_range, workers)


@dataclass(frozen=True)
class SweepRow:
    epsilon: float
    batch: Optional[EstimatorBatch]
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def as_tuple(self):
        b = self.batch
        if b is None:
            nan = float("nan")
            return (self.epsilon, nan, nan, nan, nan)
        return (self.epsilon, b.mean_gamma, b.second_moment, b.minus_eps_log_Q,
                b.relative_error_per_sample)


def epsilon_sweep(spec_template: ProblemSpec, control: ControlPolicy, config: SimulationConfig,
                  eps_list: Sequence[float], *, workers: int = 1) -> list[SweepRow]:
    """One estimator batch per eps; row i uses its own noise substream."""
    eps_list = list(eps_list)
    if not eps_list:
        raise ValueError("empty epsilon list")
    if any(not e > 0 for e in eps_list):
        raise ValueError(f"epsilons must be positive, got {eps_list}")
    rows = []
    for i, eps in enumerate(eps_list):
        try:
            spec = replace(spec_template, epsilon=float(eps))
            batch = run_estimator(spec, control, config, workers=workers,
                                  stream=(_rng.IS_STREAM, i))
            rows.append(SweepRow(float(eps), batch))
        except (SampleError, ValueError, FloatingPointError) as exc:
            rows.append(SweepRow(float(eps), None, f"{type(exc).__name__}: {exc}"))
    return rows
