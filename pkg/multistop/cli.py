#!/usr/bin/env python3
"""
multistop - CLI

Commands:
    multistop dp           Threshold table and optimal value of a finite-n model
    multistop curves       Stopping curves of a limit model (ODE engine)
    multistop closed-form  Roots and curves of a closed-form class
    multistop simulate     Monte Carlo estimate of a policy's value
    multistop converge     Convergence study over a list of n
    multistop check        Analytic regression suite
    multistop replay       Re-execute a run record and compare artifacts

Exit status: 0 success, 1 engine error, 2 configuration error.
"""

from pathlib import Path
import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np
import yaml

from .schema import (ConfigError, MultistopError, QuadSpec, RunConfig, SolveSpec, load_document, resolve_seed)
from .logger import RunLog
from .core import NEG_INF, ClassTag, StoppingCurveFamily, eval_curve, refined_time_grid
from .models import ClassIntensity, load_model, make_H, make_v, parse_family
from . import closed_form, dp_oracle, ode_solver, simulate

log = logging.getLogger(__name__)

COMMON = ("model", "spec", "out", "format", "seed", "threads", "verbose", "record", "command")


def _guarantee(value) -> float:
    return NEG_INF if value is None else float(value)


def _write(runlog: RunLog, path: str | Path, content: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(content)
    runlog.log_artifact(path, content)
    print(f"Wrote {path}")


def _stamped(doc: dict, runlog: RunLog) -> dict:
    meta = dict(doc.get("metadata", {}))
    meta.update(config_hash=runlog.record.config_hash, seed=runlog.record.seed)
    return {**doc, "metadata": meta}


def _stamp(doc: dict, runlog: RunLog) -> str:
    return json.dumps(_stamped(doc, runlog), sort_keys=True)


def _model(config: RunConfig):
    if config.model_path is None:
        raise ConfigError(f"{config.subcommand} needs --model")
    return load_model(config.model_path)


def cmd_dp(config: RunConfig, runlog: RunLog) -> int:
    """Finite-n threshold table."""
    opts = config.options
    mf = _model(config)
    model = mf.require_discrete()
    if opts.get("n"):
        model = model.with_n(int(opts["n"]))
    m = int(opts["m"])
    table = dp_oracle.backward_thresholds(model, m, quad=config.quad)
    runlog.log_solve("dp", n=model.n, m=m, error_estimate=table.error_estimate, exact=table.exact)
    guarantee = _guarantee(opts.get("guarantee"))
    if opts.get("value"):
        print(repr(dp_oracle.optimal_value(table, guarantee)))
    if opts.get("policy"):
        with open(opts["policy"]) as f:
            rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
        realization = [float(x) for r in rows for x in r if x.strip()]
        result = dp_oracle.run_policy(table, realization, guarantee)
        print(f"stops: {list(result.stops)}")
        print(f"values: {list(result.values)}")
        print(f"reward: {result.reward!r}")
    if config.out:
        if config.output_format == "json":
            _write(runlog, config.out, _stamp(table.to_dict(), runlog))
        else:
            _write(runlog, config.out, table.to_csv(runlog.header))
    return 0


def _curve_summary(family: StoppingCurveFamily) -> None:
    x = family.c if math.isfinite(family.c) else NEG_INF
    print(f"{'level':>5} {'t':>6} {'u':>14}")
    for j in range(1, family.m + 1):
        for t in (0.0, 0.25, 0.5, 0.75, 0.9, 0.99):
            print(f"{j:>5} {t:>6.2f} {eval_curve(family, j, t, x):>14.8f}")


def _write_curves(config: RunConfig, runlog: RunLog, family: StoppingCurveFamily) -> None:
    if not config.out:
        return
    if config.output_format == "json":
        _write(runlog, config.out, _stamp(family.to_dict(), runlog))
    else:
        _write(runlog, config.out, family.to_csv(runlog.header))


def cmd_curves(config: RunConfig, runlog: RunLog) -> int:
    """Stopping curves by backward ODE integration."""
    m = int(config.options["m"])
    intensity = _model(config).require_intensity()
    family = ode_solver.solve_curve_family(intensity, m, config.solve)
    runlog.log_solve("ode", m=m, metadata=family.metadata)
    _curve_summary(family)
    _write_curves(config, runlog, family)
    return 0


def cmd_closed_form(config: RunConfig, runlog: RunLog) -> int:
    """Roots r_j, guarantee-free values and, with --out, tabulated curves."""
    opts = config.options
    m = int(opts["m"])
    if config.model_path:
        intensity = _model(config).require_intensity()
        if intensity.closed_form is None:
            raise ConfigError("model carries no closed-form class tag")
        tag = intensity.closed_form
    else:
        if not (opts.get("case") and opts.get("H") and opts.get("v")):
            raise ConfigError("closed-form needs --model or all of --case, --H, --v")
        tag = ClassTag(int(opts["case"]), make_H(parse_family(opts["H"])), make_v(parse_family(opts["v"])), {})
        intensity = ClassIntensity(tag)
    sol = closed_form.build_from_tag(tag, m, config.quad)
    runlog.log_solve("closed_form", metadata=sol.diagnostics())
    x = intensity.c
    print(f"{'j':>3} {'r_j':>20} {'u^j(0)':>20} {'gamma^j(0)':>20}")
    for j, r in enumerate(sol.roots, start=1):
        print(f"{j:>3} {r:>20.12f} {closed_form.eval_u(sol, j, 0.0, x):>20.12f} "
              f"{closed_form.eval_gamma(sol, j, 0.0, x):>20.12f}")
    if config.out:
        t_grid = refined_time_grid(config.solve.uniform_points, config.solve.refined_points,
                                   config.solve.epsilon)
        x_grid = np.asarray(config.solve.x_grid or intensity.default_x_grid(), float)
        _write_curves(config, runlog, sol.tabulate(t_grid, x_grid, intensity.model_hash()))
    return 0


def cmd_simulate(config: RunConfig, runlog: RunLog) -> int:
    """Estimate a policy's value; Poisson runs use the limit model."""
    opts = config.options
    m = int(opts["m"])
    mf = _model(config)
    policy = simulate.PolicySpec(opts.get("policy", "dp"), m, delta=float(opts.get("delta", 1e-3)),
                                 closure=not opts.get("no_closure"), verbatim=bool(opts.get("verbatim")))
    guarantee = _guarantee(opts.get("guarantee"))
    reps, conf = int(opts.get("reps", 10000)), float(opts.get("confidence", 0.95))
    if opts.get("poisson"):
        intensity = mf.require_intensity()
        curves, thresholds = simulate.limit_families(intensity, m, config.solve, config.quad)
        report = simulate.estimate_value(intensity, policy, reps, config.seed, conf, thresholds=thresholds,
                                         curves=curves if policy.closure else None, guarantee=guarantee,
                                         threads=config.threads, bias_check=bool(opts.get("bias_check")))
        limit = eval_curve(curves, m, 0.0, max(guarantee, curves.c))
        scaled = None
    else:
        model = mf.require_discrete()
        if opts.get("n"):
            model = model.with_n(int(opts["n"]))
        table = thresholds = None
        if policy.kind == "dp":
            table = dp_oracle.backward_thresholds(model, m, quad=config.quad)
        else:
            _, thresholds = simulate.limit_families(model.limit_intensity(), m, config.solve, config.quad)
        report = simulate.estimate_value(model, policy, reps, config.seed, conf, table=table, thresholds=thresholds,
                                         guarantee=guarantee, threads=config.threads)
        limit = None
        scaled = model.scaled(report.mean) if model.domain is not None else None
    doc = {"policy": policy.to_dict(), "report": report.to_dict(), "scaled_mean": scaled, "limit": limit,
           "config_hash": runlog.record.config_hash}
    runlog.log_diagnostic("estimate", **doc)
    text = yaml.dump(doc, default_flow_style=False, sort_keys=False)
    print(text, end="")
    if config.out:
        _write(runlog, config.out, json.dumps(doc, sort_keys=True) if config.output_format == "json" else text)
    return 0


def cmd_converge(config: RunConfig, runlog: RunLog) -> int:
    """Per-n rows of scaled values against the limit."""
    opts = config.options
    m = int(opts["m"])
    ns = [int(v) for v in str(opts["n"]).split(",") if v.strip()]
    policies = tuple(p.strip() for p in str(opts.get("policy", "dp,domain")).split(",") if p.strip())
    model = _model(config).require_discrete()
    rows = simulate.convergence_study(model, ns, m, policies, int(opts.get("reps", 10000)), config.seed,
                                      quad=config.quad, confidence=float(opts.get("confidence", 0.95)),
                                      threads=config.threads, exact=not opts.get("no_exact"))
    text = simulate.study_csv(rows, runlog.header)
    print(text, end="")
    if config.out:
        if config.output_format == "json":
            _write(runlog, config.out, _stamp({"rows": [r.to_dict() for r in rows]}, runlog))
        else:
            _write(runlog, config.out, text)
    return 0


def analytic_checks() -> list[dict]:
    """Reference solutions against both engines and the DP oracle."""
    from .models import BaseDistribution, DiscreteModel, frechet_intensity, gumbel_intensity

    rows = []

    def add(name, value, reference, tol):
        delta = abs(value - reference)
        rows.append({"check": name, "delta": float(delta), "tolerance": tol, "ok": bool(delta <= tol)})

    gumbel = gumbel_intensity()
    fam = ode_solver.solve_curve_family(gumbel, 2, SolveSpec())
    # off-node times, dense toward the horizon
    ts = np.unique(np.concatenate([np.linspace(0.0, 0.99, 397), 1.0 - np.geomspace(0.5, 0.01, 181)]))
    u1 = np.array([eval_curve(fam, 1, t, NEG_INF) for t in ts])
    u2 = np.array([eval_curve(fam, 2, t, NEG_INF) for t in ts])
    r2 = -math.log1p(-math.exp(-1.0))
    add("ode gumbel u^1", np.max(np.abs(u1 - np.log1p(-ts))), 0.0, 1e-5)
    add("ode gumbel u^2", np.max(np.abs(u2 - (np.log1p(-ts) + r2))), 0.0, 1e-4)
    frechet = frechet_intensity(2.0)
    fam = ode_solver.solve_curve_family(frechet, 1, SolveSpec())
    f1 = np.array([eval_curve(fam, 1, t, 0.0) for t in ts])
    add("ode frechet u^1", np.max(np.abs(f1 - np.sqrt(2 * (1 - ts)))), 0.0, 1e-5)
    back = StoppingCurveFamily.from_json(fam.to_json())
    add("curves json round trip", float(np.max(np.abs(back.levels[1] - fam.levels[1]))), 0.0, 0.0)

    case1 = closed_form.build_from_tag(frechet.closed_form, 2)
    add("case 1 r_1", case1.roots[0], math.sqrt(2.0), 1e-9)
    add("case 1 r_2", case1.roots[1], 1.6966018035418, 1e-10)
    weib = closed_form.build_case(2, make_H({"family": "negative_power", "k": 1.0, "alpha": 1.0}),
                                  make_v({"family": "root", "p": 1.0, "q": -1.0}), 1)
    add("case 2 r_1", weib.roots[0], -2.0, 1e-9)
    case3 = closed_form.build_from_tag(gumbel.closed_form, 2)
    add("case 3 r_1", case3.roots[0], 0.0, 1e-9)
    add("case 3 r_2", case3.roots[1], r2, 1e-9)

    uniform = BaseDistribution("uniform", loc=0.0, scale=1.0)
    model = DiscreteModel(3, uniform, np.ones(3), np.zeros(3))
    table = dp_oracle.backward_thresholds(model, 1)
    add("dp uniform n=3", dp_oracle.optimal_value(table), 0.6953125, 1e-9)
    json.loads(table.to_json())
    return rows


def cmd_check(config: RunConfig, runlog: RunLog) -> int:
    """Run the analytic regression suite; nonzero exit on any failure."""
    rows = analytic_checks()
    print(f"{'check':<26} {'delta':>12} {'tolerance':>10}  status")
    for r in rows:
        print(f"{r['check']:<26} {r['delta']:>12.3e} {r['tolerance']:>10.1e}  {'ok' if r['ok'] else 'FAIL'}")
    failed = [r["check"] for r in rows if not r["ok"]]
    runlog.log_diagnostic("check", failed=failed, count=len(rows))
    if config.out:
        doc = {"checks": rows, "failed": failed}
        if config.output_format == "json":
            _write(runlog, config.out, _stamp(doc, runlog))
        else:
            _write(runlog, config.out, f"# {runlog.header}\n" + yaml.dump(_stamped(doc, runlog), sort_keys=False))
    return 1 if failed else 0


def cmd_replay(args) -> int:
    """Re-execute a run record and compare artifact hashes."""
    from .replayer import replay_run

    result = replay_run(args.record_file, workspace=args.workspace)
    for path, status in result["artifacts"].items():
        print(f"  {status:<10} {path}")
    if result["identical"]:
        print("Artifacts are byte-identical.")
        return 0
    print("Artifacts differ.")
    return 1


COMMANDS = {
    "dp": cmd_dp,
    "curves": cmd_curves,
    "closed-form": cmd_closed_form,
    "simulate": cmd_simulate,
    "converge": cmd_converge,
    "check": cmd_check,
}


def execute(config: RunConfig, runlog: RunLog) -> int:
    log.debug("%s with config %s", config.subcommand, runlog.record.config_hash)
    return COMMANDS[config.subcommand](config, runlog)


def _common(p: argparse.ArgumentParser, model: bool = True) -> None:
    if model:
        p.add_argument("--model", help="Model file (YAML or JSON)")
    p.add_argument("--spec", help="Engine options file with 'solve' and 'quad' blocks")
    p.add_argument("--out", help="Output artifact path")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--seed", type=int, help="Root seed (default: $MULTISTOP_SEED or 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--record", help="Run record path (default: .multistop/<run id>.yaml)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multistop", description="Optimal multiple stopping of extreme-value sequences")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dp", help="Finite-n threshold table")
    _common(p)
    p.add_argument("--n", type=int, help="Override n of the model file")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--value", action="store_true", help="Print the optimal value")
    p.add_argument("--policy", help="CSV realization to run the optimal policy on")
    p.add_argument("--guarantee", type=float)

    p = sub.add_parser("curves", help="Stopping curves by ODE integration")
    _common(p)
    p.add_argument("--m", type=int, required=True)

    p = sub.add_parser("closed-form", help="Closed-form class solution")
    _common(p)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--case", type=int, choices=[1, 2, 3])
    p.add_argument("--H", help="H family, e.g. power:k=2,alpha=3")
    p.add_argument("--v", help="v family, e.g. root:p=1,q=0.5")

    p = sub.add_parser("simulate", help="Monte Carlo estimate of a policy's value")
    _common(p)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--policy", choices=list(simulate.POLICY_KINDS), default="dp")
    p.add_argument("--reps", type=int, default=10000)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--poisson", action="store_true", help="Simulate the Poisson limit model")
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--no-closure", action="store_true")
    p.add_argument("--bias-check", action="store_true")
    p.add_argument("--verbatim", action="store_true", help="Weibull correction with the literal gamma_{c,0} form")
    p.add_argument("--guarantee", type=float)

    p = sub.add_parser("converge", help="Convergence study over n")
    _common(p)
    p.add_argument("--n", required=True, help="Comma-separated list of n")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--policy", default="dp,domain")
    p.add_argument("--reps", type=int, default=10000)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--no-exact", action="store_true")

    p = sub.add_parser("check", help="Analytic regression suite")
    _common(p, model=False)

    p = sub.add_parser("replay", help="Re-execute a run record")
    p.add_argument("record_file")
    p.add_argument("-w", "--workspace", help="Directory for the replayed artifacts")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def build_config(args: argparse.Namespace) -> RunConfig:
    solve, quad = SolveSpec(), QuadSpec()
    if args.spec:
        doc = load_document(args.spec)
        solve = SolveSpec.from_dict(doc.get("solve", {}))
        quad = QuadSpec.from_dict(doc.get("quad", {}))
    options = {k: v for k, v in vars(args).items() if k not in COMMON}
    return RunConfig(
        subcommand=args.command,
        model_path=getattr(args, "model", None),
        options=options,
        solve=solve,
        quad=quad,
        out=args.out,
        output_format=args.format,
        seed=resolve_seed(args.seed),
        threads=args.threads,
        verbose=args.verbose,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "replay":
        try:
            return cmd_replay(args)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        except MultistopError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    try:
        config = build_config(args)
        runlog = RunLog.new_run(config, args.record)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return execute(config, runlog)
    except ConfigError as exc:
        runlog.log_diagnostic("config error", error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MultistopError as exc:
        runlog.log_diagnostic("engine error", error=str(exc), kind=type(exc).__name__)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
