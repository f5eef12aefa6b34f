"""Scenario runner: ``flab <command> [--config FILE] [flags] --out DIR``.

Every run writes ``report.json`` (verdicts, results, the exact config and a
timestamp) plus deterministic CSV series into the output directory. The exit
code is 0 when every verdict passes, 1 when one fails and 2 for bad configs.
``--expect-fail P4`` inverts the convention for the named verdicts.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import warnings
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, counterexample, diffusion, extended_feller, polynomial, presets, transport
from .config import COMMANDS, Scenario, load_config, parse_ladder
from .errors import ConfigInvalid, FlabError
from .semigroup import estimate_operator_norm
from .weighted_space import (
    SampleGrid,
    exp_quadratic,
    one_plus_norm_sq,
    polynomial_weight,
    sw_approximate,
    unit_weight,
)

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

WEIGHTS = {
    "one-plus-norm-sq": lambda: one_plus_norm_sq(1),
    "exp-quadratic": lambda: exp_quadratic(1, 1.0),
    "unit": lambda: unit_weight(1),
}

FUNCTIONS = {
    "sin": lambda x: np.sin(x[:, 0]),
    "cos": lambda x: np.cos(x[:, 0]),
    "abs": lambda x: np.abs(x[:, 0]),
    "gauss": lambda x: np.exp(-x[:, 0] ** 2),
    "x": lambda x: x[:, 0],
}


# -- output -------------------------------------------------------------------------------

def _atomic_write(path: Path, data: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


class Outcome:
    def __init__(self):
        self.verdicts: dict = {}
        self.result: dict = {}
        self.csvs: dict = {}

    def table(self, name, header, rows):
        self.csvs[name] = _csv_text(header, rows)


# -- helpers ------------------------------------------------------------------------------

def _weight(sc: Scenario):
    if isinstance(sc.weight, list):
        try:
            return polynomial_weight(sc.weight)
        except (ValueError, FlabError) as exc:
            raise ConfigInvalid(f"bad polynomial weight {sc.weight!r}: {exc}") from None
    try:
        return WEIGHTS[sc.weight]()
    except KeyError:
        raise ConfigInvalid(f"unknown weight {sc.weight!r}; choose from {', '.join(WEIGHTS)}") from None


def _grid(sc: Scenario, lo=-5.0, hi=5.0, step=0.1) -> SampleGrid:
    g = sc.grid or {"lo": lo, "hi": hi, "step": step}
    return SampleGrid.lattice([g["lo"]], [g["hi"]], [g["step"]])


def _require_preset(sc: Scenario, allowed) -> str:
    if sc.preset not in allowed:
        raise ConfigInvalid(f"{sc.command} needs --preset in {', '.join(allowed)}; got {sc.preset!r}")
    return sc.preset


# -- commands -----------------------------------------------------------------------------

def run_axioms(sc: Scenario, out: Outcome) -> None:
    name = _require_preset(sc, presets.AXIOM_PRESETS)
    p = presets.axiom_preset(name, n_paths=sc.n_paths, seed=sc.seed)
    if sc.times is not None:
        p.times = list(sc.times)
    if sc.grid is not None and name != "chain":
        p.grid = _grid(sc)
    rep = p.run(tol=max(sc.tol, p.tol))
    out.verdicts.update(rep.verdicts)
    out.result["axioms"] = rep.to_dict()
    if name == "chain":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            table = counterexample.p4_blowup_table(2.0, presets.CHAIN_LADDER, sc.n_max)
        out.result["p4_blowup"] = {"rows": table.to_rows(), "increasing": table.increasing}
        out.verdicts["P4"] = bool(out.verdicts["P4"] and not table.increasing)
    out.table("norm_profile.csv", ["t", "norm_estimate"], rep.p4_norm_profile)
    out.table("p3_trend.csv", ["t", "max_weighted_residual"], rep.p3_trend)


def run_transport(sc: Scenario, out: Outcome) -> None:
    name = _require_preset(sc, ("contraction", "shift", "logistic", "linear-rk4"))
    w = _weight(sc)
    if name == "contraction":
        flow = transport.linear_flow(-1.0, w)
    elif name == "shift":
        flow = transport.affine_flow(0.0, 1.0, w)
    elif name == "logistic":
        flow = transport.logistic_flow(1.0, 1.0, w)
    else:
        flow = transport.flow_from_field(transport.preset_field("linear", -1.0), step=1e-3, w=w)
    grid = _grid(sc, 0.0, 3.0, 0.05) if name == "logistic" else _grid(sc)
    times = sc.times or [0.1, 0.25, 0.5, 1.0]
    rep = transport.validate_semiflow(flow, grid, times, tol=sc.tol)
    out.verdicts.update({f"semiflow_{k}": v for k, v in rep.verdicts.items()})
    S = transport.transport_semigroup(flow)
    norms = [(t, estimate_operator_norm(S, t, grid)) for t in times]
    # homomorphism: P(t)(f g) = P(t)f P(t)g for products
    fs = [FUNCTIONS["sin"], FUNCTIONS["gauss"]]
    hom = max(transport.check_homomorphism(S, lambda v: v[:, 0] * v[:, 1], fs, grid, t) for t in times)
    out.verdicts["homomorphism"] = bool(hom <= 1e-10)
    out.result.update(semiflow=rep.to_dict(), homomorphism_residual=hom,
                      operator_norms=[{"t": t, "norm": n} for t, n in norms])
    out.table("operator_norm.csv", ["t", "norm_estimate"], norms)
    out.table("growth_profile.csv", ["t", "C_t"], rep.growth.profile)


def run_poly(sc: Scenario, out: Outcome) -> None:
    name = _require_preset(sc, ("bm", "ou", "gbm"))
    spec = presets.diffusion_preset(name)
    A = polynomial.generator_from_diffusion(spec, sc.degree)
    grid = _grid(sc)
    times = sc.times or [0.1, 0.5, 1.0]
    if sc.degree >= 2:
        rho = polynomial.Polynomial.univariate([1.0, 0.0, 1.0], sc.degree)
        gb = polynomial.check_growth_bound(A, rho, grid, times)
        out.verdicts["growth_bound"] = gb.passes
        out.result["growth_bound"] = gb.to_dict()
    law = 0.0
    for t in times:
        for s in times:
            diff = A.exp(t + s) - A.exp(t) @ A.exp(s)
            law = max(law, float(np.max(np.abs(diff))))
    out.verdicts["semigroup_law"] = bool(law <= 1e-10)
    out.result.update(generator=A.entries, basis=[list(e) for e in A.basis.exponents],
                      semigroup_law_residual=law, opnorm=polynomial.operator_2norm(A.entries))
    out.table("generator.csv", ["row"] + [f"e{'_'.join(map(str, e))}" for e in A.basis.exponents],
              [["e" + "_".join(map(str, e)), *row] for e, row in zip(A.basis.exponents, A.entries)])


def run_diffusion(sc: Scenario, out: Outcome, dump: Optional[Path]) -> None:
    name = _require_preset(sc, tuple(presets.DIFFUSIONS))
    spec = presets.diffusion_preset(name)
    w = _weight(sc)
    times = sorted(set(sc.times or [sc.T]) | {sc.T})
    ens = diffusion.simulate_paths(spec, sc.x0[0], sc.T, sc.dt, sc.n_paths, sc.seed,
                                   record_times=None if dump else times)
    rows = []
    for t in times:
        m1 = ens.estimate(FUNCTIONS["x"], t)
        m2 = ens.estimate(lambda x: x[:, 0] ** 2, t)
        rows.append((t, m1.mean, m1.standard_error, m2.mean, m2.standard_error))
    out.table("summary.csv", ["t", "mean", "mean_se", "second_moment", "second_moment_se"], rows)
    omega = sc.omega if sc.omega is not None else presets.OMEGA.get(name, 1.0)
    grid_x0 = list(np.linspace(-3.0, 3.0, 9))
    sm = diffusion.supermartingale_check(spec, w, omega, grid_x0, times, sc.dt, sc.n_paths, sc.seed)
    out.verdicts["supermartingale"] = sm.passes
    out.result.update(n_flagged=ens.n_flagged, supermartingale=sm.to_dict())
    out.table("supermartingale.csv", ["x0", "t", "estimate", "se", "rho_x0", "margin", "ok"],
              [(r["x0"][0], r["t"], r["estimate"], r["se"], r["rho_x0"], r["margin"], r["ok"]) for r in sm.rows])
    if dump:
        diffusion.write_path_dump(dump, ens)
        out.result["path_dump"] = str(dump)


DEFAULT_INDICATORS = [
    "x(1) > 0",
    "x(0.5) < 0.5",
    "x(0.25) > -1 & x(1) < 1",
    "x(0.5) > 1 | x(1) < -1",
    "(x(0.25) > 0 | x(0.5) > 0) & x(1) > -0.5",
]


def run_extended(sc: Scenario, out: Outcome) -> None:
    name = _require_preset(sc, ("bm", "ou"))
    spec = presets.diffusion_preset(name)
    w = _weight(sc)
    omega = sc.omega if sc.omega is not None else presets.OMEGA[name]
    params = extended_feller.killed_diffusion_params(spec, w, omega)
    exprs = sc.indicators or DEFAULT_INDICATORS
    try:
        inds = [extended_feller.parse_indicator(e) for e in exprs]
    except ValueError as exc:
        raise ConfigInvalid(str(exc)) from None
    res = extended_feller.rn_equivalence_checks(spec, w, inds, sc.T, sc.dt, sc.n_paths, sc.seed, omega,
                                                sc.x0[0], params=params)
    for i, r in enumerate(res):
        out.verdicts[f"rn_{i}"] = r.verdict
    out.result.update(omega=omega, worst_killing_rate=params.worst_value, rn=[r.to_dict() for r in res])
    out.table("rn_equivalence.csv", ["indicator", "lhs", "lhs_se", "rhs", "rhs_se", "verdict"],
              [(r.label, r.lhs.mean, r.lhs.standard_error, r.rhs.mean, r.rhs.standard_error, r.verdict)
               for r in res])


def run_counterexample(sc: Scenario, out: Outcome) -> None:
    ladder = sc.t_ladder or [10.0 ** -k for k in range(1, 7)]
    chain = counterexample.build_chain(sc.alpha, sc.n_max)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        table = counterexample.p4_blowup_table(sc.alpha, ladder, sc.n_max)
    rows = table.to_rows()
    out.table("blowup.csv", ["t", "log_s", "s_or_inf_flag", "argmax_n", "truncated"],
              [(r["t"], r["log_s"], r["s_or_inf_flag"], r["argmax_n"], r["truncated"]) for r in rows])
    fwd = []
    for n in range(1, min(10, sc.n_max)):
        for t in (0.1, 0.5, 1.0):
            fwd.append((n, t, counterexample.forward_equation_residual(chain, n, t),
                        abs(counterexample.transition_row(chain, n, t).total() - 1.0)))
    out.table("forward_residuals.csv", ["n", "t", "residual", "row_sum_defect"], fwd)
    out.verdicts["forward_equations"] = all(r <= 1e-7 and d <= 1e-12 for _, _, r, d in fwd)
    # P4 holds only if s(t) stays bounded as t decreases
    out.verdicts["P4"] = not bool(table.increasing) if table.increasing is not None else True
    out.result.update(alpha=sc.alpha, blowup=rows, increasing=table.increasing,
                      warnings=[str(w.message) for w in caught])


def run_approx(sc: Scenario, out: Outcome) -> None:
    if sc.function not in FUNCTIONS:
        raise ConfigInvalid(f"unknown function {sc.function!r}; choose from {', '.join(FUNCTIONS)}")
    w = _weight(sc)
    f = FUNCTIONS[sc.function]
    lo, hi = w.box(sc.R) if w.box is not None else (np.array([-5.0]), np.array([5.0]))
    grid = _grid(sc, float(lo[0]), float(hi[0]), 0.01)
    rows = []
    for d in sc.degrees:
        a = sw_approximate(f, w, int(d), sc.R, grid)
        rows.append((int(d), a.error.value, a.inside_error.value))
    errs = [r[1] for r in rows]
    out.verdicts["decreasing"] = all(b < a for a, b in zip(errs, errs[1:]))
    out.table("sw_errors.csv", ["degree", "rho_norm_error", "inside_error"], rows)
    out.result["errors"] = [{"degree": d, "error": e, "inside_error": i} for d, e, i in rows]


# -- entry point --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flab", description="Numerical checks for weighted Feller semigroups.")
    sub = ap.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="JSON or TOML scenario file")
        p.add_argument("--out", default=f"flab-{cmd}", help="output directory")
        p.add_argument("--expect-fail", action="append", default=None, metavar="VERDICT",
                       help="verdict expected to fail (repeatable)")
        p.add_argument("--preset")
        p.add_argument("--weight")
        p.add_argument("--seed", type=int)
        p.add_argument("--dt", type=float)
        p.add_argument("--n-paths", type=int, dest="n_paths")
        p.add_argument("--T", type=float, dest="T")
        p.add_argument("--x0", type=float, action="append")
        p.add_argument("--omega", type=float)
        p.add_argument("--tol", type=float)
        p.add_argument("--times", help="comma list or decade range like 1e-1..1e-3")
        if cmd == "diffusion":
            p.add_argument("--dump-paths", help="write the full ensemble as a binary dump")
        if cmd == "extended":
            p.add_argument("--indicator", action="append", dest="indicators")
        if cmd == "counterexample":
            p.add_argument("--alpha", type=float)
            p.add_argument("--t-ladder", dest="t_ladder")
            p.add_argument("--n-max", type=int, dest="n_max")
        if cmd == "poly":
            p.add_argument("--degree", type=int)
        if cmd == "approx":
            p.add_argument("--function")
            p.add_argument("--R", type=float, dest="R")
            p.add_argument("--degrees", help="comma list of degrees")
    return ap


_OVERRIDES = ("preset", "weight", "seed", "dt", "n_paths", "T", "x0", "omega", "tol", "indicators",
              "alpha", "n_max", "degree", "function", "R")


def scenario_from_args(args) -> Scenario:
    data = load_config(args.config) if args.config else {}
    if args.config and not data:
        raise ConfigInvalid("config is empty")
    if "command" in data and data["command"] != args.command:
        raise ConfigInvalid(f"config is for {data['command']!r}, not {args.command!r}")
    data["command"] = args.command
    for key in _OVERRIDES:
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    if getattr(args, "times", None):
        data["times"] = parse_ladder(args.times)
    if getattr(args, "t_ladder", None):
        data["t_ladder"] = parse_ladder(args.t_ladder)
    if getattr(args, "degrees", None):
        try:
            data["degrees"] = [int(v) for v in args.degrees.split(",")]
        except ValueError:
            raise ConfigInvalid(f"cannot parse degrees {args.degrees!r}") from None
    if args.expect_fail:
        data["expect_fail"] = list(args.expect_fail)
    return Scenario.from_dict(data)


RUNNERS = {
    "axioms": run_axioms,
    "transport": run_transport,
    "poly": run_poly,
    "extended": run_extended,
    "counterexample": run_counterexample,
    "approx": run_approx,
}


def decide(verdicts: dict, expect_fail) -> bool:
    """All verdicts pass, except those listed in ``expect_fail`` which must fail."""
    expected = {v.upper() for v in expect_fail}
    unknown = expected - {k.upper() for k in verdicts}
    if unknown:
        raise ConfigInvalid(f"--expect-fail names unknown verdicts: {', '.join(sorted(unknown))}")
    return all((not ok) if k.upper() in expected else ok for k, ok in verdicts.items())


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Outcome()
    try:
        sc = scenario_from_args(args)
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        try:
            if sc.command == "diffusion":
                run_diffusion(sc, out, Path(args.dump_paths) if args.dump_paths else None)
            else:
                RUNNERS[sc.command](sc, out)
        except ConfigInvalid:
            raise
        except FlabError as exc:
            # a finding, not a bad config: report it and fail the scenario
            out.verdicts["completed"] = False
            out.result["error"] = {"type": type(exc).__name__, "message": str(exc)}
        passed = decide(out.verdicts, sc.expect_fail)
    except ConfigInvalid as exc:
        print(f"flab: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = {
        "command": sc.command,
        "passed": passed,
        "verdicts": out.verdicts,
        "result": out.result,
        "config": sc.to_dict(),
        "metadata": {"timestamp": datetime.now(timezone.utc).isoformat(), "version": __version__},
    }
    _atomic_write(outdir / "report.json", json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    for name, text in sorted(out.csvs.items()):
        _atomic_write(outdir / name, text)
    status = "PASS" if passed else "FAIL"
    print(f"{sc.command}: {status} " + " ".join(f"{k}={'ok' if v else 'fail'}" for k, v in out.verdicts.items()))
    return EXIT_PASS if passed else EXIT_FAIL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
