"""Command-line front end: build models, allocate, acquire, map, predict, simulate, evaluate.

Every stage reads and writes plain files so stages compose through paths.
Exit codes: 0 success, 1 infeasible schedule, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

from . import perfmodel
from .allocation import ALLOCATORS, AllocationPlan, allocate
from .dag import BUILTIN_KINDS, Dataflow, DagError, builtin_dag, get_rate, load_dataflow, topo_order
from .mapping import (D_SERIES, DEFAULT_CATALOG, Cluster, InsufficientResources, MappingPlan,
                      acquire_vms, make_mapper, map_with_retry)
from .perfmodel import ModelError, TaskPerfModel, build_model, load_models
from .predictor import predict
from .simulator import DEFAULT_STEP, SimConfig, compare, find_max_stable_rate, simulate

log = logging.getLogger("streamsched")

EXIT_OK, EXIT_INFEASIBLE, EXIT_USAGE = 0, 1, 2
MAPPERS = ("DSM", "RSM", "SAM")
# RSM packs MBA's many small threads by single-thread memory and can need far more than rho
MAX_EXTRA = 40


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def atomic_write(path: str | Path, text: str) -> Path:
    """Write via a temporary file in the same directory and rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path: str | Path, doc) -> Path:
    return atomic_write(path, json.dumps(doc, indent=2, sort_keys=False) + "\n")


def csv_text(rows: list[dict], columns: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    cols = list(columns or rows[0].keys())
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def emit(args, doc, rows: list[dict] | None = None, name: str = "result") -> None:
    """Print ``doc`` (json) or ``rows`` (csv); also save under ``--out`` when given."""
    if args.format == "csv" and rows is not None:
        text = csv_text(rows)
        suffix = ".csv"
    else:
        text = json.dumps(doc, indent=2) + "\n"
        suffix = ".json"
    sys.stdout.write(text)
    if args.out:
        atomic_write(Path(args.out) / f"{name}{suffix}", text)


def out_path(args, name: str) -> Path:
    return Path(args.out or ".") / name


def resolve_dag(spec: str) -> Dataflow:
    if spec in BUILTIN_KINDS:
        return builtin_dag(spec)
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"DAG {spec!r} is neither a builtin ({', '.join(BUILTIN_KINDS)}) nor a file")
    return load_dataflow(path)


def resolve_catalog(text: str | None):
    if not text:
        return DEFAULT_CATALOG
    by_name = {v.size: v for v in D_SERIES}
    try:
        return tuple(by_name[name.strip().upper()] for name in text.split(","))
    except KeyError as exc:
        raise UsageError(f"unknown VM size {exc.args[0]}; known: {', '.join(by_name)}") from None


def models_for(args) -> dict[str, TaskPerfModel]:
    return load_models(args.models)


def check_pair(allocator: str, mapper: str) -> None:
    if allocator.upper() not in ALLOCATORS:
        raise UsageError(f"unknown allocator {allocator!r}")
    if mapper.upper() not in MAPPERS:
        raise UsageError(f"unknown mapper {mapper!r}")
    if mapper.upper() == "SAM" and allocator.upper() != "MBA":
        raise UsageError("SAM mapping needs an MBA allocation")


def sim_config(args, omega: float = 0.0) -> SimConfig:
    return SimConfig(omega=omega, duration=args.duration, warmup=args.warmup,
                     seed=args.seed, tick=args.tick)


# ---------------------------------------------------------------- model

def _synthetic_capacity(spec: str):
    """``linear:100``, ``flat:500`` or ``bell:peak,threads,base``."""
    try:
        shape, _, params = spec.partition(":")
        vals = [float(v) for v in params.split(",")] if params else []
        if shape == "linear" and len(vals) == 1:
            return perfmodel.linear_cap(vals[0])
        if shape == "flat" and len(vals) == 1:
            return perfmodel.flat_cap(vals[0])
        if shape == "bell" and len(vals) == 3:
            return perfmodel.bell_cap(vals[0], int(vals[1]), vals[2])
    except ValueError:
        pass
    raise UsageError(f"bad synthetic runner spec {spec!r}; use linear:R, flat:R or bell:PEAK,THREADS,BASE")


def cmd_model_build(args) -> int:
    if bool(args.fixture) == bool(args.synthetic):
        raise UsageError("give exactly one of --fixture or --synthetic")
    if args.fixture:
        model = perfmodel.load_fixture(args.fixture)
    else:
        runner = perfmodel.synthetic_runner(_synthetic_capacity(args.synthetic),
                                            args.cpu_per_thread, args.mem_per_thread)
        model = build_model(runner, args.kind, delta_tau=args.delta_tau, delta_omega=args.delta_omega,
                            tau_max=args.tau_max, omega_max=args.omega_max)
    path = out_path(args, f"{model.kind}.json")
    write_json(path, model.to_dict())
    print(path)
    return EXIT_OK


def cmd_model_show(args) -> int:
    path = Path(args.model)
    model = TaskPerfModel.load(path) if path.exists() else models_for(args).get(args.model)
    if model is None:
        raise UsageError(f"no model named {args.model!r}")
    rows = [{"threads": p.threads, "peak_rate": p.peak_rate, "cpu": p.cpu, "mem": p.mem}
            for p in model.points]
    omega_hat, tau_hat = model.max_peak()
    doc = model.to_dict() | {"omega_hat": omega_hat, "tau_hat": tau_hat}
    emit(args, doc, rows, f"model-{model.kind}")
    return EXIT_OK


# ---------------------------------------------------------------- pipeline stages

def cmd_rate(args) -> int:
    g = resolve_dag(args.dag)
    rates = get_rate(g, args.omega)
    rows = [{"task": t, "rate": rates[t]} for t in topo_order(g)]
    emit(args, {"omega": args.omega, "rates": rates}, rows, "rates")
    return EXIT_OK


def cmd_allocate(args) -> int:
    g = resolve_dag(args.dag)
    plan = allocate(args.allocator, g, args.omega, models_for(args))
    path = write_json(out_path(args, "allocation.json"), plan.to_dict())
    log.info("wrote %s (rho=%d)", path, plan.rho)
    print(json.dumps(plan.to_dict(), indent=2))
    return EXIT_OK


def cmd_acquire(args) -> int:
    if args.rho is None and args.allocation is None:
        raise UsageError("give --rho or --allocation")
    rho = args.rho if args.rho is not None else AllocationPlan.load(args.allocation).rho
    if rho < 0:
        raise UsageError("rho must be non-negative")
    cluster = acquire_vms(rho, resolve_catalog(args.catalog))
    write_json(out_path(args, "cluster.json"), cluster.to_dict())
    print(json.dumps(cluster.to_dict(), indent=2))
    return EXIT_OK


def cmd_map(args) -> int:
    """Map an allocation; with --omega and --allocator it also allocates (the full schedule)."""
    g = resolve_dag(args.dag)
    models = models_for(args)
    if args.allocation:
        alloc = AllocationPlan.load(args.allocation)
    elif args.omega is not None and args.allocator:
        alloc = allocate(args.allocator, g, args.omega, models)
        write_json(out_path(args, "allocation.json"), alloc.to_dict())
    else:
        raise UsageError("give --allocation, or --omega with --allocator")
    check_pair(alloc.algorithm, args.mapper)
    mapper = make_mapper(args.mapper, models, tuple(args.weights))
    if args.cluster:
        cluster = Cluster.load(args.cluster)
        plan = mapper(g, alloc, cluster)
    else:
        plan, cluster = map_with_retry(mapper, g, alloc, resolve_catalog(args.catalog), args.max_extra)
    write_json(out_path(args, "cluster.json"), cluster.to_dict())
    write_json(out_path(args, "mapping.json"), plan.to_dict())
    print(json.dumps({"rho": alloc.rho, "slots": cluster.total_slots,
                      "extra_slots": plan.extra_slots, "vms": len(cluster.vms)}, indent=2))
    return EXIT_OK


def cmd_predict(args) -> int:
    g = resolve_dag(args.dag)
    mapping = MappingPlan.load(args.mapping)
    cluster = Cluster.load(args.cluster)
    pred = predict(g, mapping, models_for(args), cluster, args.omega)
    rows = [{"vm": v, "cpu": c, "mem": m} for v, (c, m) in pred.vms.items()]
    emit(args, pred.to_dict(), rows, "prediction")
    return EXIT_OK


def cmd_simulate(args) -> int:
    g = resolve_dag(args.dag)
    mapping = MappingPlan.load(args.mapping)
    cluster = Cluster.load(args.cluster) if args.cluster else None
    models = models_for(args)
    omega = args.omega
    doc: dict = {}
    if args.max_rate:
        omega = find_max_stable_rate(g, mapping, models, args.step, sim_config(args), cluster)
        doc["max_stable_rate"] = omega
    elif omega is None:
        raise UsageError("give --omega or --max-rate")
    report = simulate(g, mapping, models, sim_config(args, omega), cluster, keep_trace=bool(args.trace))
    doc |= report.to_dict()
    if args.trace:
        report.write_trace(args.trace)
    rows = [{"vm": v, "cpu": c, "mem": m} for v, (c, m) in report.vms.items()]
    emit(args, doc, rows, "simulation")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

SUMMARY_COLUMNS = ("dag", "allocator", "mapper", "omega", "planned_rate", "rho", "slots", "extra_slots",
                   "vms", "predicted_rate", "simulated_rate", "rate_error", "max_cpu_delta", "error")


def max_plannable_rate(g: Dataflow, allocator: str, models, slots: int, step: float = 10.0,
                       limit: float = 1e5) -> float:
    """Largest multiple of ``step`` whose allocation still fits in ``slots``."""
    best = 0.0
    omega = step
    while omega <= limit and allocate(allocator, g, omega, models).rho <= slots:
        best = omega
        omega += step
    return best


def evaluate_cell(g: Dataflow, allocator: str, mapper: str, omega: float | None, models, args,
                  fixed: Cluster | None = None) -> dict:
    row: dict = {"allocator": allocator, "mapper": mapper, "omega": omega, "error": ""}
    try:
        check_pair(allocator, mapper)
        if fixed is not None:
            omega = max_plannable_rate(g, allocator, models, fixed.total_slots, args.step)
            row["omega"] = omega
            if omega <= 0:
                raise InsufficientResources("source", allocator)
        alloc = allocate(allocator, g, omega, models)
        map_fn = make_mapper(mapper, models)
        if fixed is not None:
            plan, cluster = map_fn(g, alloc, fixed), fixed
        else:
            plan, cluster = map_with_retry(map_fn, g, alloc, resolve_catalog(args.catalog), args.max_extra)
        pred = predict(g, plan, models, cluster)
        sim_rate = find_max_stable_rate(g, plan, models, args.step, sim_config(args), cluster)
        report = simulate(g, plan, models, sim_config(args, sim_rate), cluster)
        acc = compare(predict(g, plan, models, cluster, sim_rate), report, sim_rate)
        row |= {"planned_rate": omega, "rho": alloc.rho, "slots": cluster.total_slots,
                "extra_slots": plan.extra_slots, "vms": len(cluster.vms),
                "predicted_rate": round(pred.predicted_rate, 3), "simulated_rate": sim_rate,
                "rate_error": round((sim_rate - pred.predicted_rate) / pred.predicted_rate, 4)
                if pred.predicted_rate else None,
                "max_cpu_delta": round(acc.max_cpu_delta, 3),
                "detail": {"allocation": alloc.to_dict(), "cluster": cluster.to_dict(),
                           "mapping": plan.to_dict(), "prediction": pred.to_dict(),
                           "simulation": report.to_dict(), "comparison": acc.to_dict()}}
    except (InsufficientResources, ModelError, DagError, UsageError, ValueError) as exc:
        row["error"] = str(exc)
    return row


def cmd_evaluate(args) -> int:
    models = models_for(args)
    dags = [(d, resolve_dag(d)) for d in args.dag]
    fixed = None
    if args.fixed_cluster:
        p = Path(args.fixed_cluster)
        if p.exists():
            fixed = Cluster.load(p)
        else:
            try:
                fixed = acquire_vms(int(args.fixed_cluster), resolve_catalog(args.catalog))
            except ValueError:
                raise UsageError("--fixed-cluster takes a cluster file or a slot count") from None
    pairs = [tuple(p.upper().split("+")) for p in args.pairs]
    for p in pairs:
        if len(p) != 2:
            raise UsageError(f"pairs look like MBA+SAM, got {'+'.join(p)}")
        check_pair(*p)
    rates = [None] if fixed is not None else args.rates
    rows = []
    for name, g in dags:
        for omega in rates:
            for allocator, mapper in pairs:
                row = evaluate_cell(g, allocator, mapper, omega, models, args, fixed)
                row["dag"] = Path(name).stem
                detail = row.pop("detail", None)
                if detail is not None and args.out:
                    cell = f"{row['dag']}-{allocator}-{mapper}-{row['omega']:g}"
                    write_json(Path(args.out) / "cells" / f"{cell}.json", detail)
                rows.append(row)
    table = csv_text(rows, SUMMARY_COLUMNS)
    atomic_write(out_path(args, "summary.csv"), table)
    if args.format == "csv":
        sys.stdout.write(table)
    else:
        print(json.dumps(rows, indent=2))
    return EXIT_INFEASIBLE if rows and all(r["error"] for r in rows) else EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # subcommands repeat the global flags without defaults so either position works
        def d(value):
            return argparse.SUPPRESS if suppress else value

        p = argparse.ArgumentParser(add_help=False)
        p.add_argument("--models", metavar="DIR", default=d(None),
                       help="directory of model files overriding the fixtures")
        p.add_argument("--seed", type=int, default=d(0))
        p.add_argument("--out", metavar="DIR", default=d(None),
                       help="output directory (default: current directory)")
        p.add_argument("--format", choices=("json", "csv"), default=d("json"))
        p.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return p

    common = global_flags(True)

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--duration", type=float, default=120.0)
    sim.add_argument("--warmup", type=float, default=20.0)
    sim.add_argument("--tick", type=float, default=1.0)
    sim.add_argument("--step", type=float, default=DEFAULT_STEP, help="rate step for the max stable search")

    mapopts = argparse.ArgumentParser(add_help=False)
    mapopts.add_argument("--catalog", help="comma separated VM sizes, e.g. D1,D2,D3")
    mapopts.add_argument("--max-extra", type=int, default=MAX_EXTRA, help="extra slots to try when mapping fails")

    parser = argparse.ArgumentParser(prog="streamsched", parents=[global_flags(False)],
                                     description="Model-driven scheduling of streaming dataflows.")
    sub = parser.add_subparsers(dest="command", required=True)

    model = sub.add_parser("model", help="build or inspect performance models")
    msub = model.add_subparsers(dest="model_command", required=True)
    mb = msub.add_parser("build", parents=[common])
    mb.add_argument("--fixture", choices=perfmodel.FIXTURE_IDS)
    mb.add_argument("--synthetic", help="linear:R | flat:R | bell:PEAK,THREADS,BASE")
    mb.add_argument("--kind", default="synthetic")
    mb.add_argument("--delta-tau", type=int)
    mb.add_argument("--delta-omega", type=float)
    mb.add_argument("--tau-max", type=int, default=100)
    mb.add_argument("--omega-max", type=float, default=1e6)
    mb.add_argument("--cpu-per-thread", type=float, default=5.0)
    mb.add_argument("--mem-per-thread", type=float, default=2.0)
    mb.set_defaults(func=cmd_model_build)
    ms = msub.add_parser("show", parents=[common])
    ms.add_argument("model", help="model file or fixture id")
    ms.set_defaults(func=cmd_model_show)

    p = sub.add_parser("rate", parents=[common], help="per-task input rates")
    p.add_argument("--dag", required=True)
    p.add_argument("--omega", type=float, required=True)
    p.set_defaults(func=cmd_rate)

    p = sub.add_parser("allocate", parents=[common], help="allocate threads and slots")
    p.add_argument("--dag", required=True)
    p.add_argument("--omega", type=float, required=True)
    p.add_argument("--allocator", type=str.upper, choices=sorted(ALLOCATORS), default="MBA")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("acquire", parents=[common], help="acquire VMs for a slot count")
    p.add_argument("--rho", type=int)
    p.add_argument("--allocation")
    p.add_argument("--catalog")
    p.set_defaults(func=cmd_acquire)

    p = sub.add_parser("map", parents=[common, mapopts], help="map threads to slots")
    p.add_argument("--dag", required=True)
    p.add_argument("--allocation")
    p.add_argument("--omega", type=float)
    p.add_argument("--allocator", type=str.upper, choices=sorted(ALLOCATORS))
    p.add_argument("--mapper", type=str.upper, choices=MAPPERS, default="SAM")
    p.add_argument("--cluster", help="map onto this cluster instead of acquiring one")
    p.add_argument("--weights", type=float, nargs=3, default=(1.0, 1.0, 1.0),
                   metavar=("W_MEM", "W_CPU", "W_NET"), help="RSM distance weights")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("predict", parents=[common], help="predict rate and utilization")
    p.add_argument("--dag", required=True)
    p.add_argument("--mapping", required=True)
    p.add_argument("--cluster", required=True)
    p.add_argument("--omega", type=float, help="rate for utilization (default: predicted rate)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", parents=[common, sim], help="simulate a mapped dataflow")
    p.add_argument("--dag", required=True)
    p.add_argument("--mapping", required=True)
    p.add_argument("--cluster")
    p.add_argument("--omega", type=float)
    p.add_argument("--max-rate", action="store_true", help="search the max stable rate first")
    p.add_argument("--trace", help="write per-tuple latency CSV here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", parents=[common, sim, mapopts], help="run the experiment matrix")
    p.add_argument("--dag", nargs="+", default=list(BUILTIN_KINDS))
    p.add_argument("--rates", type=float, nargs="+", default=[50.0, 100.0, 200.0])
    p.add_argument("--pairs", nargs="+", default=["LSA+DSM", "LSA+RSM", "MBA+DSM", "MBA+RSM", "MBA+SAM"])
    p.add_argument("--fixed-cluster", help="cluster file or slot count; search the max plannable rate")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InsufficientResources as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (UsageError, DagError, ModelError, FileNotFoundError, KeyError, ValueError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
