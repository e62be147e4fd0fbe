"""Command-line front end: ``herdlab <command> --scenario <path> --out <dir>``.

Heavy imports happen after the thread count is fixed so that BLAS pools
honour ``--threads`` / ``HERDLAB_THREADS``.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import sys

COMMANDS = ("simulate", "chaos-rates", "fp-check", "duality", "optimize", "gamma", "validate")

SCHEMAS = {
    "rates": ("N", "replicas", "q", "coupled_err", "coupled_se", "wq_err", "wq_se"),
    "fit": ("column", "slope", "intercept", "r2", "predicted"),
    "duality": ("phi_id", "lhs", "rhs", "gap", "se"),
    "weak_residual": ("phi_id", "t", "residual"),
    "gamma": ("N", "minFN", "se", "gap_to_Fstar", "cross_eval"),
    "trace": ("eval_id", "total", "best_so_far"),
    "cost": ("component", "value", "se"),
    "validation": ("check", "estimate", "bound", "passed", "note"),
    "trajectory": ("t", "kind", "index", "coord", "value"),
}

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "dtype"):
        return repr(float(v)) if v.dtype.kind == "f" else str(v.item())
    return str(v)


class Writer:
    """Collects outputs inside ``out_dir``; refuses to write a name twice."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.outputs = []

    def path(self, name):
        if name in self.outputs:
            raise ValueError(f"output {name} written twice")
        self.outputs.append(name)
        return os.path.join(self.out_dir, name)

    def csv(self, name, schema, rows):
        header = SCHEMAS[schema]
        with open(self.path(name), "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                if len(row) != len(header):
                    raise ValueError(f"{name}: row has {len(row)} cells, schema has {len(header)}")
                w.writerow([_cell(v) for v in row])

    def json(self, name, doc):
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- command drivers ---------------------------------------------------------------


def _bank(scn):
    from .fokker_planck import default_bank

    scale = scn.experiment["bank_scale"]
    if scale is None:
        scale = max(scn.spec.initial.herd_law.scale(), 1e-6)
    return default_bank(scn.spec.d, scale)


def cmd_validate(scn, seed, out):
    from .errors import ValidationError
    from .model import validate_assumptions

    report = validate_assumptions(scn.spec, costs=scn.costs, control=scn.control)
    out.csv("validation.csv", "validation", report.rows())
    if not report.passed:
        raise ValidationError(f"system fails assumption checks: {report.summary()}", report.failures()[0].name)


def cmd_simulate(scn, seed, out):
    from .dynamics import simulate_finite, write_trajectory_binary, write_trajectory_csv

    bundle = simulate_finite(scn.spec, scn.control, seed, 0)
    write_trajectory_csv(bundle, out.path("trajectory.csv"))
    write_trajectory_binary(bundle, out.path("trajectory.bin"))


def cmd_chaos_rates(scn, seed, out):
    from .chaos import fit_loglog_slope, predicted_exponent, run_rate_experiment
    from .errors import FitError, UnsupportedError

    ex = scn.experiment
    table = run_rate_experiment(scn.spec, scn.control, ex["N_list"], ex["N_ref"], ex["replicas"], ex["q"], seed)
    out.csv(
        "rates.csv",
        "rates",
        [(r.N, r.replicas, r.q, r.coupled_err, r.coupled_se, r.wq_err, r.wq_se) for r in table.rows],
    )
    try:
        predicted = predicted_exponent(ex["q"], scn.spec.d, scn.spec.p).exponent
    except UnsupportedError:
        predicted = float("nan")
    rows = []
    for column in ("coupled_err", "wq_err"):
        try:
            slope, intercept, r2 = fit_loglog_slope(table, column)
        except FitError:
            slope = intercept = r2 = float("nan")
        rows.append((column, slope, intercept, r2, predicted))
    out.csv("fit.csv", "fit", rows)


def cmd_fp_check(scn, seed, out):
    from .dynamics import simulate_mean_field_reference
    from .fokker_planck import weak_residual

    spec = scn.spec
    N_ref = scn.experiment["N_ref"]
    _, flow = simulate_mean_field_reference(spec.with_(N=min(spec.N, N_ref)), scn.control, N_ref, seed, 0)
    report = weak_residual(flow, spec, scn.control, _bank(scn))
    rows = []
    for name, res in zip(report.names, report.residuals):
        rows.extend((name, float(t), float(r)) for t, r in zip(report.times, res))
    out.csv("weak_residual.csv", "weak_residual", rows)


def cmd_duality(scn, seed, out):
    from .fokker_planck import duality_check

    ex = scn.experiment
    report = duality_check(scn.spec, scn.control, _bank(scn), ex["N_ref"], ex["inner_replicas"], seed)
    out.csv("duality.csv", "duality", [(r.phi_id, r.lhs, r.rhs, r.gap, r.se) for r in report.rows])


def _params_doc(params):
    return {
        "h": params.h_knots.tolist(),
        "weights": params.g_weights.tolist(),
        "bias": params.g_bias.tolist(),
    }


def cmd_optimize(scn, seed, out):
    from .optimize import eval_cost_finite, minimize_cost

    ex = scn.experiment
    spec, costs = scn.spec, scn.costs

    def evaluator(p):
        return eval_cost_finite(spec, costs, p, ex["replicas"], seed)

    res = minimize_cost(spec, evaluator, scn.control, ex["budget"], seed, restarts=ex["restarts"], search=scn.search)
    out.csv("trace.csv", "trace", res.trace)
    c = res.cost
    out.csv(
        "cost.csv",
        "cost",
        [
            ("running", c.running, c.se_running),
            ("transient", c.transient, c.se_transient),
            ("endpoint", c.endpoint, c.se_endpoint),
            ("total", c.total, c.se_total),
        ],
    )
    out.json("best_control.json", _params_doc(res.params))


def cmd_gamma(scn, seed, out):
    from .optimize import gamma_experiment

    ex = scn.experiment
    report = gamma_experiment(
        scn.spec,
        scn.costs,
        ex["N_list"],
        ex["N_star"],
        ex["budget"],
        ex["replicas"],
        seed,
        init=scn.control,
        restarts=ex["restarts"],
        search=scn.search,
    )
    out.csv("gamma.csv", "gamma", [(r.N, r.min_FN, r.se, r.gap, r.cross_eval) for r in report.rows])
    for key, res in report.searches.items():
        out.csv(f"trace_{key}.csv", "trace", res.trace)


DRIVERS = {
    "simulate": cmd_simulate,
    "chaos-rates": cmd_chaos_rates,
    "fp-check": cmd_fp_check,
    "duality": cmd_duality,
    "optimize": cmd_optimize,
    "gamma": cmd_gamma,
    "validate": cmd_validate,
}


# -- dispatch -----------------------------------------------------------------------


def _error_record(exc):
    from .errors import HerdlabError

    if isinstance(exc, HerdlabError):
        return exc.exit_code, exc.to_record()
    if isinstance(exc, OSError):
        return 4, {"type": type(exc).__name__, "message": str(exc)}
    return 1, {"type": type(exc).__name__, "message": str(exc)}


def run_command(command, scenario, out_dir, seed=None, threads=None):
    """Run one command and write its CSVs plus ``manifest.json`` (last). Returns the manifest dict."""
    from . import __version__
    from .scenario import parse_scenario

    if command not in DRIVERS:
        raise ValueError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    manifest = {
        "command": command,
        "version": __version__,
        "scenario_path": str(scenario),
        "scenario_sha256": None,
        "seed": seed,
        "threads": threads,
        "started": _now(),
        "finished": None,
        "outputs": [],
        "errors": [],
        "exit_code": 0,
        "config": None,
    }
    out = None
    try:
        os.makedirs(out_dir, exist_ok=True)
        out = Writer(out_dir)
        # validate command reports failed checks itself instead of failing the load
        scn = parse_scenario(scenario, validate=command != "validate")
        manifest["config"] = scn.to_dict()
        manifest["scenario_sha256"] = scn.sha256()
        if seed is None:
            seed = scn.seed
        manifest["seed"] = int(seed)
        DRIVERS[command](scn, int(seed), out)
    except Exception as exc:  # every failure becomes a machine-readable record
        code, record = _error_record(exc)
        manifest["exit_code"] = code
        manifest["errors"].append(record)
    manifest["finished"] = _now()
    if out is not None:
        manifest["outputs"] = list(out.outputs)
        try:
            with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True)
                fh.write("\n")
        except OSError as exc:
            if manifest["exit_code"] == 0:
                manifest["exit_code"] = 4
            manifest["errors"].append({"type": type(exc).__name__, "message": str(exc)})
    return manifest


def _positive_int(text):
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return val


def _seed(text):
    val = int(text)
    if not 0 <= val < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return val


def build_parser():
    parser = argparse.ArgumentParser(prog="herdlab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--scenario", required=True, help="path to the JSON scenario")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=_seed, default=None, help="override experiment.seed")
    parser.add_argument("--threads", type=_positive_int, default=None, help="worker threads (default: HERDLAB_THREADS or 1)")
    return parser


def resolve_threads(arg, environ=None):
    environ = os.environ if environ is None else environ
    if arg is not None:
        return arg
    raw = environ.get("HERDLAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = resolve_threads(args.threads)
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)
    manifest = run_command(args.command, args.scenario, args.out, args.seed, threads)
    for rec in manifest["errors"]:
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return manifest["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
