"""Command-line interface, replication sweeps and CSV summaries."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .estimators import ConvergenceError, SolverSettings
from .pipelines import AlgorithmParams, resolve_active_budgets, run_active, run_known, calibrate_alpha
from .tasks import SCHEMA, InstanceConfig, MultiTaskInstance, generate_instance

CSV_HEADER = [
    "algo", "N", "N_pre", "n_target", "rep", "seed", "subopt",
    "err_h", "err_2", "nu_l1", "policy_mode", "wall_ms",
]

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM}
_MAT = {"type": "array", "items": _VEC}

INSTANCE_SCHEMA = {
    "type": "object",
    "required": ["schema", "kind", "config", "phi", "rho", "B_true", "W_true", "theta_true", "nu_true"],
    "properties": {
        "schema": {"const": SCHEMA},
        "kind": {"const": "instance"},
        "config": {"type": "object"},
        "phi": {"type": "array", "items": _MAT},
        "rho": _VEC,
        "B_true": _MAT,
        "W_true": _MAT,
        "theta_true": _MAT,
        "nu_true": _VEC,
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "schema", "kind", "algorithm", "allocations", "estimate", "err_h", "err_2", "nu_l1",
        "policy", "subopt", "C_star", "C_theta", "epsilon", "radius", "timing", "diagnostics", "seeds", "params",
    ],
    "properties": {
        "schema": {"const": SCHEMA},
        "kind": {"const": "run_report"},
        "algorithm": {"enum": ["known", "active"]},
        "allocations": {"type": "object", "additionalProperties": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "estimate": {
            "type": "object",
            "required": ["schema", "kind", "theta_hat", "basis_hat", "Lambda", "theta_hat_target"],
            "properties": {"kind": {"const": "estimate_bundle"}, "theta_hat": _MAT, "basis_hat": _MAT, "Lambda": _MAT},
        },
        "err_h": {"type": "number", "minimum": 0},
        "err_2": {"type": "number", "minimum": 0},
        "nu_used": _VEC,
        "nu_hat": {"anyOf": [{"type": "null"}, _VEC]},
        "nu_l1": {"type": "number", "minimum": 0},
        "policy": {
            "type": "object",
            "required": ["schema", "kind", "action", "method_tag"],
            "properties": {
                "kind": {"const": "policy"},
                "action": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
                "method_tag": {"enum": ["exact", "greedy"]},
            },
        },
        "subopt": {"type": "number", "minimum": 0},
        "C_star": {"type": "number", "minimum": 0},
        "C_theta": {"type": "number", "minimum": 0},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "radius": {"type": "number", "minimum": 0},
        "timing": {"type": "object"},
        "diagnostics": {"type": "object"},
        "seeds": {"type": "object"},
        "params": {"type": "object"},
    },
}


def validate_instance_doc(doc):
    jsonschema.validate(doc, INSTANCE_SCHEMA)


def validate_report_doc(doc):
    jsonschema.validate(doc, REPORT_SCHEMA)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class ExperimentSpec:
    instance: MultiTaskInstance
    algorithm: str  # known | active | uniform-baseline
    N_grid: tuple
    reps: int
    seed: int
    params: AlgorithmParams
    threads: int = 1

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("replication count must be at least 1")
        if not self.N_grid:
            raise ValueError("budget grid must be nonempty")
        if self.algorithm not in ("known", "active", "uniform-baseline"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")

    def arms(self):
        """(CSV label, allocation) pairs compared by the sweep."""
        if self.algorithm == "uniform-baseline":
            return [("uniform", "uniform")]
        return [("active", "active"), ("uniform", "uniform")]

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "kind": "sweep_params",
            "algorithm": self.algorithm,
            "N_grid": list(self.N_grid),
            "reps": self.reps,
            "seed": self.seed,
            "params": self.params.to_dict(),
            "instance_config": dataclasses.asdict(self.instance.config),
        }


def rep_seed(master: int, rep: int) -> int:
    """Seed of replication ``rep``; shared by every arm and budget so runs are paired."""
    return int(np.random.SeedSequence([int(master), int(rep)]).generate_state(1)[0])


def _one_run(job):
    inst, base, two_phase, label, allocation, N, rep, seed = job
    params = base.replace(N=int(N), seed=seed, allocation=allocation)
    t0 = time.perf_counter()
    if two_phase:
        report = run_active(inst, params)
        b = resolve_active_budgets(inst, params)
        n_pre, n_target = b["N_pre_s"], b["n"]
    else:
        report = run_known(inst, params)
        n_pre, n_target = 0, 0
    wall = (time.perf_counter() - t0) * 1000.0
    return [
        label, int(N), n_pre, n_target, rep, seed, repr(report.subopt), repr(report.err_h),
        repr(report.err_2), repr(report.nu_l1), report.policy_mode, f"{wall:.1f}",
    ]


def _jobs(spec: ExperimentSpec, two_phase: bool):
    for N in spec.N_grid:
        for rep in range(spec.reps):
            seed = rep_seed(spec.seed, rep)
            for label, allocation in spec.arms():
                yield (spec.instance, spec.params, two_phase, label, allocation, N, rep, seed)


def run_sweep(spec: ExperimentSpec, out_path, two_phase: bool = False):
    """Write one CSV row per (budget, replication, arm), flushed as it completes.

    Rows appear in budget, replication, arm order regardless of the worker
    count, and a ``.params.json`` sidecar records the resolved settings.
    """
    out_path = Path(out_path)
    sidecar = out_path.with_name(out_path.name + ".params.json")
    doc = spec.to_dict()
    doc["two_phase"] = bool(two_phase)
    sidecar.write_text(json.dumps(doc, indent=1, sort_keys=True))
    jobs = list(_jobs(spec, two_phase))
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        fh.flush()
        if spec.threads > 1:
            with ProcessPoolExecutor(max_workers=spec.threads) as pool:
                for row in pool.map(_one_run, jobs):
                    w.writerow(row)
                    fh.flush()
        else:
            for job in jobs:
                w.writerow(_one_run(job))
                fh.flush()
    return out_path


# --------------------------------------------------------------------------
# summaries


def read_sweep_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}:1: empty file") from None
        if header != CSV_HEADER:
            raise ValueError(f"{path}:1: header does not match the CSV contract")
        for row in reader:
            line = reader.line_num
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}:{line}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            rec = dict(zip(CSV_HEADER, row))
            try:
                for key in ("N", "N_pre", "n_target", "rep", "seed"):
                    rec[key] = int(rec[key])
                for key in ("subopt", "err_h", "err_2", "nu_l1", "wall_ms"):
                    rec[key] = float(rec[key])
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
            rows.append(rec)
    return rows


def loglog_slope(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or np.any(y <= 0) or np.unique(x).size < 2:
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def summarize(csv_path):
    """Per (algo, N): count, median and IQR of SubOpt and H-norm error; per algo: log-log slope."""
    rows = read_sweep_csv(csv_path)
    cells = {}
    for r in rows:
        cells.setdefault((r["algo"], r["N"]), []).append(r)
    table = []
    for (algo, N), rs in sorted(cells.items()):
        so = np.array([r["subopt"] for r in rs])
        eh = np.array([r["err_h"] for r in rs])
        q = lambda a: (float(np.median(a)), float(np.percentile(a, 75) - np.percentile(a, 25)))
        (m_so, iqr_so), (m_eh, iqr_eh) = q(so), q(eh)
        table.append({"algo": algo, "N": N, "count": len(rs), "subopt_median": m_so, "subopt_iqr": iqr_so,
                      "err_h_median": m_eh, "err_h_iqr": iqr_eh})
    slopes = {}
    for algo in sorted({c["algo"] for c in table}):
        cs = [c for c in table if c["algo"] == algo]
        slopes[algo] = {
            "subopt": loglog_slope([c["N"] for c in cs], [c["subopt_median"] for c in cs]),
            "err_h": loglog_slope([c["N"] for c in cs], [c["err_h_median"] for c in cs]),
        }
    return {"cells": table, "slopes": slopes}


def format_summary(summary) -> str:
    lines = [f"{'algo':<8} {'N':>7} {'count':>5} {'subopt_med':>12} {'subopt_iqr':>12} {'err_h_med':>12} {'err_h_iqr':>12}"]
    for c in summary["cells"]:
        lines.append(
            f"{c['algo']:<8} {c['N']:>7d} {c['count']:>5d} {c['subopt_median']:>12.5g} {c['subopt_iqr']:>12.5g} "
            f"{c['err_h_median']:>12.5g} {c['err_h_iqr']:>12.5g}"
        )
    for algo, s in summary["slopes"].items():
        lines.append(f"slope[{algo}]: subopt {s['subopt']:.4f}  err_h {s['err_h']:.4f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# CLI


def resolve_threads(flag):
    if flag is not None:
        if flag < 1:
            raise UsageError("--threads must be at least 1")
        return flag
    env = os.environ.get("DUELRANK_THREADS")
    if env:
        try:
            v = int(env)
        except ValueError:
            raise UsageError(f"DUELRANK_THREADS must be an integer, got {env!r}") from None
        if v < 1:
            raise UsageError("DUELRANK_THREADS must be at least 1")
        return v
    return 1


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("budgets must be positive integers")
    return vals


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_instance_args(p):
    p.add_argument("--instance", help="instance JSON written by `gen`")


def _add_algo_args(p, active: bool):
    p.add_argument("--config", help="resolved parameter JSON from an earlier run; flags given explicitly override it")
    p.add_argument("--N", type=int, help="source budget (second phase for the two-phase run)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--policy-mode", choices=["auto", "exact", "greedy"])
    p.add_argument("--allocation", choices=["active", "uniform"])
    p.add_argument("--restarts", type=int)
    if active:
        p.add_argument("--n", type=int, help="target budget of the second phase")
        p.add_argument("--N-pre", dest="N_pre_s", type=int, help="source budget of the first phase")
        p.add_argument("--n-pre", dest="n_pre", type=int, help="target budget of the first phase")
        p.add_argument("--lambda-s", dest="lambda_s", type=float)
        p.add_argument("--lambda-pre-s", dest="lambda_pre_s", type=float)
        p.add_argument("--lambda-pre", dest="lambda_pre", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--R", type=float)
        p.add_argument("--nu0", type=_float_list)
        p.add_argument("--lambda-from", dest="lambda_from", choices=["phase1", "all"])
    p.add_argument("--seed", type=int, default=None)


def build_parser():
    parser = _Parser(prog="duelrank", description="Multi-task preference learning experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen", help="write a synthetic instance as JSON")
    for name, typ, default in [
        ("d", int, 8), ("k", int, 2), ("M", int, 4), ("n-contexts", int, 20), ("n-actions", int, 5),
        ("B-x", float, 2.0), ("B-theta", float, 4.0),
    ]:
        g.add_argument(f"--{name}", type=typ, default=default, dest=name.replace("-", "_"))
    g.add_argument("--relevance-profile", default="uniform")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)

    for name, active in [("run-known", False), ("run-active", True)]:
        p = sub.add_parser(name, help=f"{'two-phase' if active else 'known-relevance'} run on an instance")
        _add_instance_args(p)
        _add_algo_args(p, active)
        p.add_argument("-o", "--output", required=True)

    s = sub.add_parser("sweep", help="budget grid x replications x {active, uniform}")
    _add_instance_args(s)
    _add_algo_args(s, True)
    s.add_argument("--algorithm", choices=["known", "active", "uniform-baseline"], default="known")
    s.add_argument("--N-grid", dest="N_grid", type=_int_list, required=True)
    s.add_argument("--reps", type=int, default=20)
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("-o", "--output", required=True)

    c = sub.add_parser("calibrate-alpha", help="Monte-Carlo calibration of the confidence radius")
    _add_instance_args(c)
    _add_algo_args(c, False)
    c.add_argument("--reps", type=int, default=100)
    c.add_argument("-o", "--output")

    m = sub.add_parser("summarize", help="median/IQR table and log-log slopes of a sweep CSV")
    m.add_argument("csv")
    m.add_argument("--json", action="store_true", help="print JSON instead of a table")
    return parser


def _load_instance(path) -> MultiTaskInstance:
    if path is None:
        raise UsageError("--instance is required")
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"instance file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    try:
        validate_instance_doc(doc)
    except jsonschema.ValidationError as exc:
        raise UsageError(f"{path}: not a valid instance ({exc.message})") from None
    return MultiTaskInstance.from_dict(doc)


_PARAM_FLAGS = ["N", "n", "N_pre_s", "n_pre", "epsilon", "delta", "alpha", "lam", "lambda_s", "lambda_pre_s",
                "lambda_pre", "beta", "R", "nu0", "policy_mode", "allocation", "lambda_from", "seed"]


def _params_from_args(args) -> AlgorithmParams:
    base = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        base = doc.get("params", doc)
    for key in _PARAM_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            base[key] = tuple(v) if key == "nu0" else v
    if getattr(args, "restarts", None) is not None:
        st = dict(base.get("settings") or {})
        st["restarts"] = args.restarts
        base["settings"] = st
    base.setdefault("seed", 0)
    try:
        return AlgorithmParams.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _write(path, text):
    Path(path).write_text(text)


def _report_json(report) -> str:
    doc = report.to_dict()
    validate_report_doc(doc)
    return json.dumps(doc, indent=1, sort_keys=True)


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _dispatch(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (ConvergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "gen":
        try:
            cfg = InstanceConfig(
                d=args.d, k=args.k, M=args.M, n_contexts=args.n_contexts, n_actions=args.n_actions,
                B_x=args.B_x, B_theta=args.B_theta, relevance_profile=args.relevance_profile, seed=args.seed,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        _write(args.output, generate_instance(cfg).to_json())
        return 0

    if args.command == "summarize":
        try:
            s = summarize(args.csv)
        except FileNotFoundError:
            raise UsageError(f"file not found: {args.csv}") from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        print(json.dumps(s, indent=1) if args.json else format_summary(s))
        return 0

    inst = _load_instance(args.instance)
    params = _params_from_args(args)
    try:
        if args.command == "run-known":
            _write(args.output, _report_json(run_known(inst, params)))
        elif args.command == "run-active":
            _write(args.output, _report_json(run_active(inst, params)))
        elif args.command == "sweep":
            spec = ExperimentSpec(
                instance=inst, algorithm=args.algorithm, N_grid=tuple(args.N_grid), reps=args.reps,
                seed=params.seed, params=params, threads=resolve_threads(args.threads),
            )
            run_sweep(spec, args.output, two_phase=args.algorithm == "active")
        elif args.command == "calibrate-alpha":
            alpha = calibrate_alpha(inst, params, args.reps)
            doc = {"schema": SCHEMA, "kind": "alpha_calibration", "alpha": alpha, "reps": args.reps,
                   "params": params.to_dict()}
            text = json.dumps(doc, indent=1, sort_keys=True)
            if args.output:
                _write(args.output, text)
            print(alpha)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return 0


def main():
    sys.exit(cli_main())


__all__ = [
    "CSV_HEADER",
    "INSTANCE_SCHEMA",
    "REPORT_SCHEMA",
    "ExperimentSpec",
    "cli_main",
    "run_sweep",
    "summarize",
    "read_sweep_csv",
    "loglog_slope",
    "resolve_threads",
    "rep_seed",
    "validate_report_doc",
    "validate_instance_doc",
]
