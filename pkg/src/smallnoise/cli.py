"""Command-line runner: ``smallnoise {estimate,expand,check,compare,pde} --config FILE``.

Every run writes into one directory: a ``manifest.json`` (config echo, version,
seed, timestamps, per-task status) plus CSV files referenced by it.  CSV bodies
depend only on (config, seed), never on ``--threads`` or wall-clock time.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Optional

from . import __version__, pde1d
from .catalog import builtin_problem
from .config import ConfigError, ExperimentConfig, build_control, constant_subsolution, load_config
from .expansion import ExpansionReport, expand, expansion_report, predict_second_moment, write_report_csv
from .model import check_subsolution, sample_grid
from .rng import DIRECT_STREAM, IS_STREAM
from .simulate import SampleError, run_estimator, second_moment_direct

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_CHECK = 0, 1, 2, 3

ESTIMATE_COLUMNS = ("problem", "control", "estimator", "eps", "dt", "n", "theta_hat", "se_theta",
                    "Q_hat", "se_Q", "rel_err", "minus_eps_logQ", "degenerate_flag", "seed", "error")
COMPARE_COLUMNS = ("variant", "control", "eps", "theta_hat", "se_theta", "rel_err", "se_rel_err",
                   "minus_eps_logQ", "v0_plus_eps_v1", "rank", "error")
CHECK_COLUMNS = ("subsolution", "min_interior_residual", "max_terminal_excess", "n_interior",
                 "n_terminal", "passed")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


class RunDirectory:
    """Owns one output directory; every file goes through an atomic write."""

    def __init__(self, path: Path, command: str, cfg: ExperimentConfig, seed: int, threads: int):
        self.path = path
        self.files: list[dict] = []
        self.manifest = {
            "tool": "smallnoise",
            "version": __version__,
            "command": command,
            "config": cfg.to_dict(),
            "seed": seed,
            "threads": threads,
            "started": _now(),
            "tasks": [],
        }

    def write(self, name: str, text: str, task: str, status: str = "ok") -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        target = self.path / name
        try:
            fd, tmp = tempfile.mkstemp(dir=self.path, prefix=f".{name}.", suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, target)
        except OSError as exc:
            raise OSError(f"failed to write {target}: {exc}") from exc
        self.manifest["tasks"].append({"task": task, "status": status, "file": name})
        return target

    def task(self, name: str, status: str, detail: str = ""):
        entry = {"task": name, "status": status}
        if detail:
            entry["detail"] = detail
        self.manifest["tasks"].append(entry)

    def finish(self, exit_code: int):
        self.manifest["finished"] = _now()
        self.manifest["exit_code"] = exit_code
        self.write("manifest.json", json.dumps(self.manifest, indent=2, sort_keys=True) + "\n", "manifest")
        self.manifest["tasks"].pop()  # the manifest does not list itself


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #


def cmd_estimate(cfg: ExperimentConfig, run: RunDirectory, seed: int, threads: int) -> int:
    rows, failed = [], 0
    sim = cfg.simulation_config(seed)
    for label, params in cfg.variants():
        problem = builtin_problem(cfg.problem.name, params)
        control = build_control(cfg.control, problem)
        for i, eps in enumerate(cfg.epsilons):
            spec = replace(problem.spec, epsilon=eps)
            runs = [("is", run_estimator, (IS_STREAM, i))]
            if cfg.simulation.direct:
                runs.append(("direct", second_moment_direct, (DIRECT_STREAM, i)))
            for est, fn, stream in runs:
                try:
                    rec = fn(spec, control, sim, workers=threads, stream=stream).to_record()
                    rec["error"] = ""
                except (SampleError, ValueError, FloatingPointError) as exc:
                    failed += 1
                    rec = {"problem": spec.name, "control": control.name, "estimator": est,
                           "eps": eps, "dt": sim.dt, "seed": sim.seed,
                           "error": f"{type(exc).__name__}: {exc}"}
                rows.append(rec)
    run.write("estimates.csv", _csv_text(ESTIMATE_COLUMNS, rows), "estimate",
              "partial" if failed else "ok")
    return EXIT_PARTIAL if failed else EXIT_OK


def _summary(report: ExpansionReport, eps) -> str:
    lines = []
    if report.v0 is None:
        lines.append("expansion unavailable for this problem (stopped cost); Monte Carlo columns only")
    else:
        v0, v1 = report.v0, report.v1
        sign = report.rows[0]["v1_sign_flag"] if report.rows else ""
        exact = all(abs(r.get("residual", math.nan)) <= 1e-6 for r in report.rows) if report.rows else False
        lines.append(f"v0 = {v0:.10g}")
        lines.append(f"v1 = {v1:.10g} ({sign})")
        pred = predict_second_moment(v0, v1, eps)
        for e, lq in zip(pred.epsilons, pred.log_Q):
            lines.append(f"eps = {e:g}: predicted log Q = {lq:.10g}")
        order = report.order
        if exact:
            lines.append("expansion exact: every residual is below 1e-6")
        elif not math.isnan(order):
            lines.append(f"fitted residual order = {order:.4g}")
    lines.extend(f"notice: {n}" for n in report.notices)
    return "\n".join(lines) + "\n"


def cmd_expand(cfg: ExperimentConfig, run: RunDirectory, seed: int, threads: int) -> int:
    problem = builtin_problem(cfg.problem.name, cfg.problem.params)
    control = build_control(cfg.control, problem)
    try:
        report = expansion_report(problem.spec, control, cfg.epsilons,
                                  monte_carlo=cfg.expansion.monte_carlo, pde=cfg.expansion.pde,
                                  sim_config=cfg.simulation_config(seed),
                                  expansion_options=cfg.expansion_options(box=problem.box),
                                  pde_grid={"nx": cfg.pde.nx, "nt": cfg.pde.nt}, workers=threads)
    except (RuntimeError, ValueError) as exc:
        run.task("expand", "failed", f"{type(exc).__name__}: {exc}")
        print(f"expansion failed: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    buf = io.StringIO()
    write_report_csv(buf, report.rows)
    partial = any(n.startswith("Monte Carlo failed") for n in report.notices)
    run.write("expansion_report.csv", buf.getvalue(), "expand", "partial" if partial else "ok")
    summary = _summary(report, cfg.epsilons)
    run.write("summary.txt", summary, "summary")
    sys.stdout.write(summary)
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_check(cfg: ExperimentConfig, run: RunDirectory, seed: int, threads: int) -> int:
    problem = builtin_problem(cfg.problem.name, cfg.problem.params)
    choice = cfg.check.subsolution
    if choice == "catalog":
        if problem.subsolution is None:
            raise ConfigError(f"problem {cfg.problem.name!r} has no catalog subsolution")
        sub = problem.subsolution
    else:
        sub = constant_subsolution(0.0 if choice == "zero" else float(choice), problem.spec.dim)
    spec = problem.spec
    pts = sample_grid(spec.t0, spec.T, problem.box, cfg.check.n_time, cfg.check.n_space)
    rep = check_subsolution(sub, spec.model, spec.cost, pts, spec.T, cfg.check.tol)
    row = {"subsolution": sub.name, "min_interior_residual": rep.min_interior_residual,
           "max_terminal_excess": rep.max_terminal_excess, "n_interior": rep.n_interior,
           "n_terminal": rep.n_terminal, "passed": rep.passed}
    run.write("check.csv", _csv_text(CHECK_COLUMNS, [row]), "check", "pass" if rep.passed else "fail")
    print(f"{sub.name}: {'pass' if rep.passed else 'FAIL'} "
          f"(min residual {rep.min_interior_residual:.3g}, max terminal excess {rep.max_terminal_excess:.3g})")
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_compare(cfg: ExperimentConfig, run: RunDirectory, seed: int, threads: int) -> int:
    if len(cfg.controls) < 2:
        raise ConfigError("compare needs at least two entries under 'controls'")
    sim = cfg.simulation_config(seed)
    rows, failed = [], 0
    for label, params in cfg.variants():
        problem = builtin_problem(cfg.problem.name, params)
        controls = [build_control(c, problem) for c in cfg.controls]
        expansions = {}
        if cfg.expansion.in_compare and problem.spec.cost.smooth:
            opts = cfg.expansion_options(box=problem.box)
            for c in controls:
                try:
                    res = expand(problem.spec, c, opts)
                    expansions[c.name] = (res.v0, res.v1)
                except (RuntimeError, ValueError) as exc:
                    run.task(f"expansion:{label}:{c.name}", "failed", f"{type(exc).__name__}: {exc}")
        for i, eps in enumerate(cfg.epsilons):
            spec = replace(problem.spec, epsilon=eps)
            group = []
            for c in controls:
                row = {"variant": label, "control": c.name, "eps": eps}
                try:
                    b = run_estimator(spec, c, sim, workers=threads, stream=(IS_STREAM, i))
                    row.update(theta_hat=b.mean_gamma, se_theta=b.std_error_mean,
                               rel_err=b.relative_error_per_sample, se_rel_err=b.se_relative_error,
                               minus_eps_logQ=b.minus_eps_log_Q, error="")
                except (SampleError, ValueError, FloatingPointError) as exc:
                    failed += 1
                    row.update(rel_err=math.nan, error=f"{type(exc).__name__}: {exc}")
                if c.name in expansions:
                    v0, v1 = expansions[c.name]
                    row["v0_plus_eps_v1"] = v0 + eps * v1
                group.append(row)
            ranked = sorted((r for r in group if not _bad(r["rel_err"])), key=lambda r: r["rel_err"])
            for k, r in enumerate(ranked, 1):
                r["rank"] = k
            rows.extend(group)
    run.write("compare.csv", _csv_text(COMPARE_COLUMNS, rows), "compare", "partial" if failed else "ok")
    return EXIT_PARTIAL if failed else EXIT_OK


def _bad(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


def cmd_pde(cfg: ExperimentConfig, run: RunDirectory, seed: int, threads: int) -> int:
    problem = builtin_problem(cfg.problem.name, cfg.problem.params)
    control = build_control(cfg.control, problem)
    solver = {"psi": pde1d.solve_psi, "phi": pde1d.solve_phi, "v0": pde1d.solve_v0_hjb}[cfg.pde.solver]
    failed = 0
    summary = []
    for eps in cfg.epsilons:
        spec = replace(problem.spec, epsilon=eps)
        name = f"pde_{cfg.pde.solver}_eps{eps:g}.csv"
        try:
            grid = pde1d.default_grid(spec, eps=0.0 if cfg.pde.solver == "v0" else eps,
                                      nx=cfg.pde.nx, nt=cfg.pde.nt)
            sol = solver(spec, control, grid)
        except (RuntimeError, ValueError) as exc:
            failed += 1
            run.task(name, "failed", f"{type(exc).__name__}: {exc}")
            continue
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "x", "value"])
        x = sol.grid.x
        idx = sorted(set(range(0, len(sol.times), cfg.pde.time_stride)) | {0, len(sol.times) - 1})
        for i in idx:
            for xj, v in zip(x, sol.values[i]):
                w.writerow([repr(float(sol.times[i])), repr(float(xj)), repr(float(v))])
        run.write(name, buf.getvalue(), name)
        val = sol.at(spec.t0, float(spec.x0[0]))
        summary.append({"eps": eps, "value_at_x0": val})
        print(f"eps = {eps:g}: {cfg.pde.solver}(t0, x0) = {val:.10g}")
    run.manifest["pde_values"] = summary
    return EXIT_PARTIAL if failed else EXIT_OK


COMMANDS = {
    "estimate": cmd_estimate,
    "expand": cmd_expand,
    "check": cmd_check,
    "compare": cmd_compare,
    "pde": cmd_pde,
}
NEEDS_EPSILONS = {"estimate", "expand", "compare", "pde"}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smallnoise",
                                 description="Importance sampling diagnostics for small-noise diffusions.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--out", help="run directory (default: outputs.dir or ./runs/<command>)")
        p.add_argument("--seed", type=int, help="override simulation.seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    return ap


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, require_epsilons=args.command in NEEDS_EPSILONS)
        if args.command == "compare" and len(cfg.controls) < 2:
            raise ConfigError("compare needs at least two entries under 'controls'")
        if args.command == "pde" and not builtin_problem(cfg.problem.name, cfg.problem.params).spec.cost.smooth:
            raise ConfigError("the pde command needs a smooth terminal cost")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = cfg.simulation.seed if args.seed is None else args.seed
    out = Path(args.out or cfg.outputs.dir or Path("runs") / args.command)
    run = RunDirectory(out, args.command, cfg, seed, args.threads)
    try:
        code = COMMANDS[args.command](cfg, run, seed, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    run.finish(code)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
