"""Residual Psi_pde - (v0 + eps v1) for the OU problem under zero control.

For this problem Psi^eps = v0 + eps v1 holds exactly, so the residual measured
with numerically computed (v0, v1) is pure discretization error.  The script
prints the residual for each path resolution M next to the residual with the
closed-form (v0, v1), which isolates the PDE error.

Usage: python3 scripts/expansion_order.py --nodes 50 100 200 400
"""
from __future__ import annotations

import argparse
import csv
from dataclasses import replace
import sys

from smallnoise import pde1d
from smallnoise.action import OptimizerOptions
from smallnoise.catalog import builtin_problem
from smallnoise.expansion import ExpansionOptions, expand, fitted_order
from smallnoise.model import zero_control

EPS = (0.4, 0.2, 0.1, 0.05)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, nargs="+", default=[50, 100, 200])
    ap.add_argument("--eps", type=float, nargs="+", default=list(EPS))
    args = ap.parse_args(argv)

    p = builtin_problem("ou_quadratic")
    ctl = zero_control(1)
    ref = p.reference
    psi = {}
    for e in args.eps:
        spec = replace(p.spec, epsilon=e)
        psi[e] = pde1d.solve_psi(spec, ctl).at(0.0, 1.0)

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["source", "nodes", "v0", "v1", *[f"r({e:g})" for e in args.eps], "fitted_order"])

    def emit(source, nodes, v0, v1):
        r = [psi[e] - v0 - e * v1 for e in args.eps]
        w.writerow([source, nodes, v0, v1, *r, fitted_order(args.eps, r)])
        sys.stdout.flush()

    emit("closed_form", "", ref["v0_zero_control"](), ref["v1_zero_control"]())
    for M in args.nodes:
        res = expand(p.spec, ctl, ExpansionOptions(optimizer=OptimizerOptions(nodes=M)))
        emit("numerical", M, res.v0, res.v1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
