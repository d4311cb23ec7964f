"""Experiment configuration: YAML mapped onto frozen dataclasses.

Unknown keys are rejected at every level, and everything is validated before
any computation or file creation.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Union

import numpy as np
import yaml

from .action import OptimizerOptions
from .catalog import BuiltinProblem, CatalogError, builtin_problem
from .expansion import ExpansionOptions
from .model import ControlPolicy, Subsolution, constant_control, control_from_subsolution, zero_control
from .simulate import SimulationConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemConfig:
    name: str
    params: Mapping[str, Any] = field(default_factory=dict)
    sweep: Mapping[str, list] = field(default_factory=dict)


@dataclass(frozen=True)
class SimulationSection:
    dt: float = 1e-3
    n_samples: int = 10_000
    seed: int = 0
    stopped: bool = True
    direct: bool = True


@dataclass(frozen=True)
class ExpansionSection:
    steps: int = 400
    nodes: int = 200
    max_iterations: int = 2000
    gradient_tolerance: float = 1e-8
    restarts: int = 5
    monte_carlo: bool = True
    pde: bool = True
    in_compare: bool = False


@dataclass(frozen=True)
class PdeSection:
    nx: int = 801
    nt: int = 4000
    solver: str = "psi"
    time_stride: int = 100


@dataclass(frozen=True)
class OutputsSection:
    dir: Optional[str] = None


@dataclass(frozen=True)
class CheckSection:
    subsolution: Union[str, float] = "catalog"
    n_time: int = 21
    n_space: int = 101
    tol: float = 1e-8


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemConfig
    control: Any = "zero"
    controls: tuple = ()
    epsilons: tuple = ()
    simulation: SimulationSection = field(default_factory=SimulationSection)
    expansion: ExpansionSection = field(default_factory=ExpansionSection)
    pde: PdeSection = field(default_factory=PdeSection)
    outputs: OutputsSection = field(default_factory=OutputsSection)
    check: CheckSection = field(default_factory=CheckSection)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    # -- derived objects ---------------------------------------------------- #

    def simulation_config(self, seed: Optional[int] = None) -> SimulationConfig:
        s = self.simulation
        return SimulationConfig(dt=s.dt, n_samples=s.n_samples,
                                seed=s.seed if seed is None else seed, stopped=s.stopped)

    def expansion_options(self, box=None) -> ExpansionOptions:
        e = self.expansion
        opt = OptimizerOptions(nodes=e.nodes, max_iterations=e.max_iterations,
                               gradient_tolerance=e.gradient_tolerance, restarts=e.restarts)
        return ExpansionOptions(steps=e.steps, optimizer=opt, box=box)

    def variants(self) -> list[tuple[str, dict]]:
        """(label, params) for each point of the optional parameter sweep."""
        base = dict(self.problem.params)
        if not self.problem.sweep:
            return [("", base)]
        (key, values), = self.problem.sweep.items()
        return [(f"{key}={v:g}" if isinstance(v, (int, float)) else f"{key}={v}", {**base, key: v})
                for v in values]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    out = {}
    for k, v in raw.items():
        default = names[k].default
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{where}.{k}: expected true/false")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{where}.{k}: expected an integer")
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where}.{k}: expected a number")
            v = float(v)
        out[k] = v
    return cls(**out)


def _check_control(spec, where: str):
    if isinstance(spec, str):
        if spec not in ("zero", "from_subsolution"):
            raise ConfigError(f"{where}: control must be 'zero', 'from_subsolution' or {{constant: [...]}}")
        return spec
    if isinstance(spec, Mapping) and set(spec) == {"constant"}:
        vals = spec["constant"]
        vals = vals if isinstance(vals, list) else [vals]
        if not vals or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            raise ConfigError(f"{where}: constant control needs a list of numbers")
        return {"constant": [float(v) for v in vals]}
    raise ConfigError(f"{where}: unrecognised control {spec!r}")


TOP_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def parse_config(raw: Any, require_epsilons: bool = True) -> ExperimentConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a mapping at the top level")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    if "problem" not in raw:
        raise ConfigError("missing required key 'problem'")
    p = raw["problem"]
    if not isinstance(p, Mapping) or "name" not in p:
        raise ConfigError("problem: expected a mapping with a 'name'")
    bad = set(p) - {"name", "params", "sweep"}
    if bad:
        raise ConfigError(f"problem: unknown key(s) {sorted(bad)}")
    params = p.get("params") or {}
    sweep = p.get("sweep") or {}
    if not isinstance(params, Mapping) or not isinstance(sweep, Mapping):
        raise ConfigError("problem.params and problem.sweep must be mappings")
    if len(sweep) > 1:
        raise ConfigError("problem.sweep: at most one swept parameter")
    for k, v in sweep.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"problem.sweep.{k}: expected a nonempty list")
    problem = ProblemConfig(str(p["name"]), dict(params), {k: list(v) for k, v in sweep.items()})
    # the catalog validates names and parameters
    try:
        for v in ([dict(params)] if not sweep else [{**params, k: x} for k, vs in sweep.items() for x in vs]):
            builtin_problem(problem.name, v)
    except (CatalogError, ValueError, TypeError) as exc:
        raise ConfigError(f"problem: {exc}") from None

    control = _check_control(raw.get("control", "zero"), "control")
    controls = raw.get("controls") or []
    if not isinstance(controls, list):
        raise ConfigError("controls: expected a list")
    controls = tuple(_check_control(c, f"controls[{i}]") for i, c in enumerate(controls))

    eps = raw.get("epsilons", [])
    if not isinstance(eps, list):
        raise ConfigError("epsilons: expected a list")
    if not eps and (require_epsilons or "epsilons" in raw):
        raise ConfigError("empty epsilon list")
    if not all(isinstance(e, (int, float)) and not isinstance(e, bool) and e > 0 for e in eps):
        raise ConfigError("epsilons: every entry must be a positive number")

    cfg = ExperimentConfig(
        problem=problem,
        control=control,
        controls=controls,
        epsilons=tuple(float(e) for e in eps),
        simulation=_section(SimulationSection, raw.get("simulation"), "simulation"),
        expansion=_section(ExpansionSection, raw.get("expansion"), "expansion"),
        pde=_section(PdeSection, raw.get("pde"), "pde"),
        outputs=_section(OutputsSection, raw.get("outputs"), "outputs"),
        check=_section(CheckSection, raw.get("check"), "check"),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    try:
        SimulationConfig(dt=cfg.simulation.dt, n_samples=cfg.simulation.n_samples,
                         seed=cfg.simulation.seed, stopped=cfg.simulation.stopped)
        cfg.expansion_options()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.expansion.steps < 1:
        raise ConfigError("expansion.steps must be positive")
    if cfg.pde.solver not in ("psi", "phi", "v0"):
        raise ConfigError("pde.solver must be one of psi, phi, v0")
    if cfg.pde.nx < 3 or cfg.pde.nt < 1 or cfg.pde.time_stride < 1:
        raise ConfigError("pde: nx >= 3, nt >= 1 and time_stride >= 1 required")
    sub = cfg.check.subsolution
    if not (sub in ("catalog", "zero") or (isinstance(sub, (int, float)) and not isinstance(sub, bool))):
        raise ConfigError("check.subsolution must be 'catalog', 'zero' or a constant")


def load_config(path, require_epsilons: bool = True) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from None
    return parse_config(raw, require_epsilons)


# --------------------------------------------------------------------------- #
# object construction
# --------------------------------------------------------------------------- #


def build_control(spec_entry, problem: BuiltinProblem) -> ControlPolicy:
    model = problem.spec.model
    if spec_entry == "zero":
        return zero_control(model.dim)
    if spec_entry == "from_subsolution":
        if problem.subsolution is None:
            raise ConfigError(f"problem {problem.spec.name!r} has no catalog subsolution")
        return control_from_subsolution(problem.subsolution, model)
    vals = spec_entry["constant"]
    if len(vals) != model.dim:
        raise ConfigError(f"constant control has {len(vals)} entries, model dimension is {model.dim}")
    return constant_control(vals)


def constant_subsolution(value: float, dim: int) -> Subsolution:
    return Subsolution(
        value=lambda t, x: value + 0.0 * np.asarray(x, dtype=float)[..., 0],
        gradient_x=lambda t, x: 0.0 * np.asarray(x, dtype=float),
        time_derivative=lambda t, x: 0.0 * np.asarray(x, dtype=float)[..., 0],
        hessian_x=lambda t, x: np.zeros(np.shape(x) + (dim,)),
        name="zero" if value == 0 else f"constant({value:g})",
    )
