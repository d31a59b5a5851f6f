"""Deterministic discrete-event simulation of a mapped dataflow.

Every (slot, task) thread group is a FIFO single-server queue with
exponential service at the group's model capacity.  Because each queue is
FIFO, its departure times follow the Lindley recursion
``d[k] = max(a[k], d[k-1]) + s[k]``, which is evaluated in closed form with a
cumulative maximum instead of popping events one at a time.  Tasks are
processed in topological order so every queue sees its complete, time-ordered
arrival stream.  Random draws are common across offered rates for a fixed seed:
source gaps and service times are unit exponentials scaled by the rate, so a
lower offered rate replays the same schedule stretched in time.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .dag import Dataflow, topo_order
from .mapping import Cluster, MappingPlan, Slot, Vm, VmSpec
from .perfmodel import LATENCY_SLOPE_MAX, TaskPerfModel
from .predictor import Prediction, _vm_cpu_shares, slot_capacity, utilization_at

log = logging.getLogger(__name__)

DEFAULT_STEP = 10.0


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    omega: float = 0.0
    duration: float = 120.0
    warmup: float = 20.0
    seed: int = 0
    tick: float = 1.0  # sampling window for latency and queue statistics

    def __post_init__(self):
        if not 0 <= self.warmup < self.duration:
            raise ValueError("need 0 <= warmup < duration")
        if self.tick <= 0:
            raise ValueError("tick must be positive")
        if self.omega < 0:
            raise ValueError("omega must be non-negative")


@dataclass
class SimReport:
    omega: float
    stable: bool
    latency_mean: float
    latency_p50: float
    latency_p99: float
    latency_slope: float
    vms: dict[str, tuple[float, float]]
    throughput: dict[str, float]
    max_queue: dict[str, int]
    slot_rates: dict[tuple[Slot, str], float] = field(default_factory=dict, repr=False)
    trace: list[tuple[int, float, float]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        def num(x):
            return x if math.isfinite(x) else None

        return {
            "omega": self.omega,
            "stable": self.stable,
            "latency": {"mean": num(self.latency_mean), "p50": num(self.latency_p50),
                        "p99": num(self.latency_p99), "slope": num(self.latency_slope)},
            "vms": [{"id": v, "cpu": c, "mem": m} for v, (c, m) in self.vms.items()],
            "throughput": self.throughput,
            "max_queue": self.max_queue,
        }

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tuple_id", "emit_time", "sink_time"])
            for tid, emit, done in self.trace:
                w.writerow([tid, f"{emit:.6f}", f"{done:.6f}"])


def _cluster_from_mapping(mapping: MappingPlan) -> Cluster:
    slots: dict[str, int] = {}
    for s in mapping.assignment.values():
        slots[s.vm] = max(slots.get(s.vm, 0), s.index)
    return Cluster([Vm(v, VmSpec(f"{n}-slot", n)) for v, n in sorted(slots.items())])


def _stream_seed(seed: int, key: str) -> np.random.Generator:
    # stable across processes, unlike hash()
    return np.random.default_rng([seed] + [ord(ch) for ch in key])


def _fifo_departures(arrivals: np.ndarray, service: np.ndarray) -> np.ndarray:
    """Departure times of a FIFO single server fed in arrival order."""
    if arrivals.size == 0:
        return arrivals.copy()
    cum = np.cumsum(service)
    prev = np.concatenate(([0.0], cum[:-1]))
    return cum + np.maximum.accumulate(arrivals - prev)


def _selectivity_counts(n: int, sigma: float) -> np.ndarray:
    """Copies emitted per input tuple so that k inputs yield floor(k * sigma) outputs."""
    k = np.arange(n + 1, dtype=float)
    total = np.floor(k * sigma + 1e-9)
    return np.diff(total).astype(int)


def _window_min_slope(times: np.ndarray, values: np.ndarray, lo: float, hi: float,
                      tick: float) -> float:
    """Trend of per-window minimum values; robust to queueing noise."""
    if times.size < 2:
        return 0.0
    bins = np.floor((times - lo) / tick).astype(int)
    nbins = max(1, int(math.floor((hi - lo) / tick + 1e-9)))  # whole windows only
    keep = (bins >= 0) & (bins < nbins)
    bins, values = bins[keep], values[keep]
    if bins.size < 2:
        return 0.0
    mins = np.full(nbins, np.inf)
    np.minimum.at(mins, bins, values)
    have = np.isfinite(mins)
    if have.sum() < 2:
        return 0.0
    centers = lo + (np.arange(nbins) + 0.5) * tick
    return median_slope(centers[have], mins[have])


def median_slope(x: np.ndarray, y: np.ndarray) -> float:
    """Theil-Sen estimate: median of all pairwise slopes, so lone bursty windows do not dominate."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    i, j = np.triu_indices(x.size, k=1)
    dx = x[j] - x[i]
    ok = dx != 0
    if not ok.any():
        return 0.0
    return float(np.median((y[j] - y[i])[ok] / dx[ok]))


def simulate(dataflow: Dataflow, mapping: MappingPlan, models: Mapping[str, TaskPerfModel],
             config: SimConfig, cluster: Cluster | None = None,
             keep_trace: bool = False) -> SimReport:
    """Run the mapped dataflow at ``config.omega`` and report stability and usage."""
    if cluster is None:
        cluster = _cluster_from_mapping(mapping)
    order = topo_order(dataflow)
    threads: dict[str, list[Slot]] = {t: [] for t in order}
    for th, slot in sorted(mapping.assignment.items()):
        if th.task not in threads:
            raise SimulationError(f"mapping places thread {th} of unknown task")
        threads[th.task].append(slot)
    for tid, slots in threads.items():
        if not slots:
            raise SimulationError(f"task {tid} has no mapped thread")

    shares = _vm_cpu_shares(dataflow, mapping, models, cluster)
    capacity: dict[tuple[Slot, str], float] = {}
    for slot, comp in mapping.slot_composition().items():
        for tid, cap in slot_capacity(dataflow, slot, comp, models, shares.get(slot.vm, 1.0)).items():
            capacity[(slot, tid)] = cap

    cfg = config
    window = cfg.duration - cfg.warmup
    # per task output stream: (times, origin ids, origin emit times)
    outputs: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    throughput: dict[str, float] = {}
    max_queue: dict[str, int] = {}
    slot_rates: dict[tuple[Slot, str], float] = {}
    grid = np.arange(cfg.warmup, cfg.duration + 1e-12, cfg.tick)
    worst = -math.inf  # fastest growth of any group's sojourn time
    next_origin = 0

    for tid in order:
        ins = dataflow.in_edges(tid)
        if not ins:
            rng = _stream_seed(cfg.seed, "source:" + tid)
            if cfg.omega > 0:
                n = int(cfg.omega * cfg.duration * 1.2 + 10 * math.sqrt(cfg.omega * cfg.duration) + 20)
                times = np.cumsum(rng.standard_exponential(n)) / cfg.omega
                times = times[times <= cfg.duration]
            else:
                times = np.empty(0)
            origin = np.arange(next_origin, next_origin + times.size)
            next_origin += times.size
            arr_t, arr_o, arr_e = times, origin, times.copy()
        else:
            parts_t, parts_o, parts_e = [], [], []
            for e in ins:
                t_up, o_up, e_up = outputs[e.src]
                reps = _selectivity_counts(t_up.size, float(e.selectivity))
                parts_t.append(np.repeat(t_up, reps))
                parts_o.append(np.repeat(o_up, reps))
                parts_e.append(np.repeat(e_up, reps))
            arr_t = np.concatenate(parts_t)
            arr_o = np.concatenate(parts_o)
            arr_e = np.concatenate(parts_e)
            idx = np.lexsort((arr_o, arr_t))
            arr_t, arr_o, arr_e = arr_t[idx], arr_o[idx], arr_e[idx]
            # a zero-capacity upstream group never releases its tuples
            ok = np.isfinite(arr_t)
            arr_t, arr_o, arr_e = arr_t[ok], arr_o[ok], arr_e[ok]

        # shuffle grouping: round robin over the task's threads
        slots = threads[tid]
        owner = np.arange(arr_t.size) % len(slots)
        dep = np.empty_like(arr_t)
        groups: dict[Slot, list[int]] = {}
        for i, s in enumerate(slots):
            groups.setdefault(s, []).append(i)
        done_tasks = 0
        qmax = 0
        for s, ordinals in sorted(groups.items()):
            mask = np.isin(owner, ordinals)
            a = arr_t[mask]
            cap = capacity[(s, tid)]
            svc = np.zeros(a.size)
            if math.isinf(cap):
                d = a.copy()
            elif cap <= 0:
                d = np.full(a.size, np.inf)
                if a.size:
                    worst = math.inf
            else:
                rng = _stream_seed(cfg.seed, f"svc:{s}:{tid}")
                svc = rng.standard_exponential(a.size) / cap
                d = _fifo_departures(a, svc)
            dep[mask] = d
            served = int(np.count_nonzero((d >= cfg.warmup) & (d <= cfg.duration)))
            slot_rates[(s, tid)] = served / window
            done_tasks += served
            if a.size and math.isfinite(cap):
                q = np.searchsorted(a, grid, side="right") - np.searchsorted(np.sort(d), grid, side="right")
                qmax = max(qmax, int(q.max()))
                fin = np.isfinite(d)
                # round robin feeds a group in runs of up to len(ordinals) tuples;
                # windows spanning several runs keep the minimum meaningful
                per_window = max(20, 3 * len(ordinals))
                horizon_count = int(np.count_nonzero(a <= cfg.duration))
                width = min(window / 3, max(cfg.tick, per_window * cfg.duration / max(1, horizon_count)))
                wait = d[fin] - svc[fin] - a[fin]  # time queued before service starts
                growth = _window_min_slope(a[fin], wait, cfg.warmup, cfg.duration, width)
                worst = max(worst, growth)
        throughput[tid] = done_tasks / window
        max_queue[tid] = qmax
        outputs[tid] = (dep, arr_o, arr_e)

    sink_t, sink_o, sink_e = [], [], []
    for tid in order:
        if not dataflow.out_edges(tid):
            d, o, e = outputs[tid]
            keep = (d >= cfg.warmup) & (d <= cfg.duration)
            sink_t.append(d[keep])
            sink_o.append(o[keep])
            sink_e.append(e[keep])
    done = np.concatenate(sink_t) if sink_t else np.empty(0)
    origin = np.concatenate(sink_o) if sink_o else np.empty(0, dtype=int)
    emitted = np.concatenate(sink_e) if sink_e else np.empty(0)
    lat = done - emitted
    if lat.size:
        mean, p50, p99 = float(lat.mean()), float(np.percentile(lat, 50)), float(np.percentile(lat, 99))
    else:
        mean = p50 = p99 = 0.0
    # a FIFO queue grows exactly when its sojourn time does, and every tuple
    # crossing that queue carries the growth into its end-to-end latency
    slope = 0.0 if worst == -math.inf else worst
    stable = slope <= LATENCY_SLOPE_MAX
    vms = utilization_at(dataflow, mapping, models, cluster, slot_rates)
    trace = []
    if keep_trace:
        srt = np.lexsort((origin, done))
        trace = [(int(origin[i]), float(emitted[i]), float(done[i])) for i in srt]
    return SimReport(float(cfg.omega), bool(stable), mean, p50, p99, float(slope), vms,
                     throughput, max_queue, slot_rates, trace)


def find_max_stable_rate(dataflow: Dataflow, mapping: MappingPlan,
                         models: Mapping[str, TaskPerfModel], step: float = DEFAULT_STEP,
                         config: SimConfig | None = None, cluster: Cluster | None = None,
                         limit: float = 1e6) -> float:
    """Largest multiple of ``step`` that simulates stably, ascending from ``step``."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = config or SimConfig()
    best = 0.0
    k = 1
    while k * step <= limit:
        omega = k * step
        cfg = SimConfig(omega, base.duration, base.warmup, base.seed, base.tick)
        if not simulate(dataflow, mapping, models, cfg, cluster).stable:
            break
        best = omega
        k += 1
    if best == 0.0:
        log.warning("unstable already at %.1f t/s; reporting 0", step)
    return best


@dataclass
class Comparison:
    rate_error: float  # relative, (simulated - predicted) / predicted
    vm_deltas: dict[str, tuple[float, float]]  # simulated - predicted (cpu, mem) points
    cpu_correlation: float | None
    mem_correlation: float | None

    @property
    def max_cpu_delta(self) -> float:
        return max((abs(c) for c, _ in self.vm_deltas.values()), default=0.0)

    def to_dict(self) -> dict:
        return {"rate_error": self.rate_error,
                "vms": [{"id": v, "cpu_delta": c, "mem_delta": m} for v, (c, m) in self.vm_deltas.items()],
                "cpu_correlation": self.cpu_correlation, "mem_correlation": self.mem_correlation}


def _corr(a: list[float], b: list[float]) -> float | None:
    if len(a) < 2 or np.std(a) == 0 or np.std(b) == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def compare(prediction: Prediction, report: SimReport, simulated_rate: float | None = None) -> Comparison:
    """Accuracy of a prediction against a simulation of the same mapping."""
    actual = report.omega if simulated_rate is None else simulated_rate
    pred = prediction.predicted_rate
    if pred == actual:
        err = 0.0
    elif pred == 0 or not math.isfinite(pred):
        err = math.inf
    else:
        err = (actual - pred) / pred
    deltas = {}
    for vm in sorted(set(prediction.vms) | set(report.vms)):
        pc, pm = prediction.vms.get(vm, (0.0, 0.0))
        sc, sm = report.vms.get(vm, (0.0, 0.0))
        deltas[vm] = (sc - pc, sm - pm)
    vms = sorted(deltas)
    cpu = _corr([prediction.vms.get(v, (0, 0))[0] for v in vms], [report.vms.get(v, (0, 0))[0] for v in vms])
    mem = _corr([prediction.vms.get(v, (0, 0))[1] for v in vms], [report.vms.get(v, (0, 0))[1] for v in vms])
    return Comparison(err, deltas, cpu, mem)
