"""Model-based prediction of the supported input rate and per-VM utilization of a mapping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .dag import Dataflow, get_rate
from .mapping import Cluster, MappingPlan, Slot
from .perfmodel import TaskPerfModel

log = logging.getLogger(__name__)

RESOLUTION = 0.1


def shuffle_split(omega: float, thread_counts: Sequence[int]) -> list[float]:
    """Shuffle grouping: each downstream thread receives an equal share of the stream."""
    total = sum(thread_counts)
    if total <= 0:
        raise ValueError("no threads to route to")
    return [omega * q / total for q in thread_counts]


@dataclass
class SlotLoad:
    slot: Slot
    threads: dict[str, int]
    incoming: dict[str, float] = field(default_factory=dict)
    capacity: dict[str, float] = field(default_factory=dict)

    @property
    def mixed(self) -> bool:
        return len(self.threads) > 1


def _contention(dataflow: Dataflow, comp: dict[str, int], models: Mapping[str, TaskPerfModel],
                vm_cpu_share: float) -> float:
    """Fraction of its model demand each task on a crowded slot can actually get."""
    mem = 0.0
    for tid, q in comp.items():
        t = dataflow.task(tid)
        if t.fixed is not None:
            mem += t.fixed.mem * q / t.fixed.threads
        else:
            mem += models[t.kind].resources(q)[1]
    mem_share = 1.0 if mem <= 100.0 else 100.0 / mem
    return min(1.0, mem_share, vm_cpu_share)


def slot_capacity(dataflow: Dataflow, slot: Slot, comp: dict[str, int],
                  models: Mapping[str, TaskPerfModel], vm_cpu_share: float = 1.0) -> dict[str, float]:
    """Peak rate each task group on ``slot`` can sustain; fixed-resource tasks are unbounded.

    A task alone on its slot runs at its model rate.  On a shared slot every
    group's model rate is scaled by the share of its model demand the slot
    can serve: slot memory is per slot, CPU is pooled across the VM
    (``vm_cpu_share``).
    """
    out: dict[str, float] = {}
    mixed = len(comp) > 1
    share = _contention(dataflow, comp, models, vm_cpu_share) if mixed else 1.0
    for tid, q in comp.items():
        t = dataflow.task(tid)
        if t.fixed is not None:
            out[tid] = math.inf
            continue
        try:
            model = models[t.kind]
        except KeyError:
            raise KeyError(f"no performance model for kind {t.kind}") from None
        out[tid] = model.peak_rate(q) * share
    return out


def _vm_cpu_shares(dataflow: Dataflow, mapping: MappingPlan, models, cluster: Cluster | None):
    """Per-VM factor when the summed model CPU of its threads exceeds the VM's cores."""
    if cluster is None:
        return {}
    demand: dict[str, float] = {}
    for slot, comp in mapping.slot_composition().items():
        for tid, q in comp.items():
            t = dataflow.task(tid)
            c = t.fixed.cpu * q / t.fixed.threads if t.fixed else models[t.kind].resources(q)[0]
            demand[slot.vm] = demand.get(slot.vm, 0.0) + c
    return {vm.id: min(1.0, 100.0 * vm.spec.slots / demand[vm.id]) if demand.get(vm.id) else 1.0
            for vm in cluster.vms}


def slot_loads(dataflow: Dataflow, mapping: MappingPlan, models: Mapping[str, TaskPerfModel],
               omega: float, cluster: Cluster | None = None) -> list[SlotLoad]:
    rates = get_rate(dataflow, omega)
    totals: dict[str, int] = {}
    for th in mapping.assignment:
        totals[th.task] = totals.get(th.task, 0) + 1
    shares = _vm_cpu_shares(dataflow, mapping, models, cluster)
    loads = []
    for slot, comp in sorted(mapping.slot_composition().items()):
        cap = slot_capacity(dataflow, slot, comp, models, shares.get(slot.vm, 1.0))
        incoming = {tid: rates[tid] * q / totals[tid] for tid, q in comp.items()}
        loads.append(SlotLoad(slot, dict(comp), incoming, cap))
    return loads


def predict_rate(dataflow: Dataflow, mapping: MappingPlan, models: Mapping[str, TaskPerfModel],
                 cluster: Cluster | None = None, resolution: float = RESOLUTION) -> float:
    """Largest DAG input rate for which no slot group receives more than it can process."""
    unit = slot_loads(dataflow, mapping, models, 1.0, cluster)
    per_unit = get_rate(dataflow, 1.0)
    aggregate: dict[str, float] = {}
    for load in unit:
        for tid, cap in load.capacity.items():
            if math.isfinite(cap):
                aggregate[tid] = aggregate.get(tid, 0.0) + cap
    bounds = [agg / per_unit[tid] for tid, agg in aggregate.items() if per_unit[tid] > 0]
    if not bounds:
        log.warning("no modeled task bounds the rate; prediction is unbounded")
        return math.inf

    def feasible(omega: float) -> bool:
        return all(r * omega <= load.capacity[t] * (1 + 1e-12)
                   for load in unit for t, r in load.incoming.items())

    lo, hi = 0.0, 10.0 * min(bounds)
    if feasible(hi):
        return hi
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def binding_groups(dataflow: Dataflow, mapping: MappingPlan, models: Mapping[str, TaskPerfModel],
                   cluster: Cluster | None = None) -> list[tuple[Slot, str, float, bool]]:
    """(slot, task, rate limit, mixed) for every bounded group, tightest first."""
    out = []
    for load in slot_loads(dataflow, mapping, models, 1.0, cluster):
        for tid, r in load.incoming.items():
            cap = load.capacity[tid]
            if r > 0 and math.isfinite(cap):
                out.append((load.slot, tid, cap / r, load.mixed))
    return sorted(out, key=lambda x: (x[2], x[0], x[1]))


def group_usage(dataflow: Dataflow, task_id: str, q: int, incoming: float,
                models: Mapping[str, TaskPerfModel], total_threads: int) -> tuple[float, float]:
    """Resources of ``q`` threads of a task receiving ``incoming`` tuples/sec."""
    t = dataflow.task(task_id)
    if t.fixed is not None:
        if incoming <= 0:
            return 0.0, 0.0
        frac = q / total_threads
        return t.fixed.cpu * frac, t.fixed.mem * frac
    model = models[t.kind]
    peak = model.peak_rate(q)
    c, m = model.resources(q)
    scale = min(1.0, incoming / peak) if peak > 0 else 1.0
    return c * scale, m * scale


def utilization_at(dataflow: Dataflow, mapping: MappingPlan, models: Mapping[str, TaskPerfModel],
                   cluster: Cluster, slot_rates: Mapping[tuple[Slot, str], float]
                   ) -> dict[str, tuple[float, float]]:
    """Per-VM (CPU%, mem%) given the observed or predicted rate into every slot group."""
    totals: dict[str, int] = {}
    for th in mapping.assignment:
        totals[th.task] = totals.get(th.task, 0) + 1
    per_vm = {vm.id: [0.0, 0.0] for vm in cluster.vms}
    for slot, comp in mapping.slot_composition().items():
        for tid, q in comp.items():
            c, m = group_usage(dataflow, tid, q, slot_rates.get((slot, tid), 0.0), models, totals[tid])
            per_vm[slot.vm][0] += c
            per_vm[slot.vm][1] += m
    out = {}
    for vm in cluster.vms:
        cap = 100.0 * vm.spec.slots
        c, m = per_vm[vm.id]
        out[vm.id] = (min(c, cap), min(m, cap))
    return out


def predict_utilization(dataflow: Dataflow, mapping: MappingPlan, models: Mapping[str, TaskPerfModel],
                        cluster: Cluster, omega: float) -> dict[str, tuple[float, float]]:
    predicted = predict_rate(dataflow, mapping, models, cluster)
    if omega > predicted + RESOLUTION:
        log.warning("utilization requested at %.1f t/s, above the predicted %.1f t/s", omega, predicted)
    rates = {(load.slot, t): r for load in slot_loads(dataflow, mapping, models, omega, cluster)
             for t, r in load.incoming.items()}
    return utilization_at(dataflow, mapping, models, cluster, rates)


@dataclass
class Prediction:
    predicted_rate: float
    omega: float
    vms: dict[str, tuple[float, float]]
    slots: list[SlotLoad]
    binding: tuple[str, str, bool] | None = None  # (slot, task, mixed)

    def to_dict(self) -> dict:
        return {
            "predicted_rate": self.predicted_rate,
            "omega": self.omega,
            "vms": [{"id": v, "cpu": c, "mem": m} for v, (c, m) in self.vms.items()],
            "slots": [{"vm": s.slot.vm, "slot": s.slot.index, "threads": s.threads,
                       "incoming": s.incoming,
                       "capacity": {k: (v if math.isfinite(v) else None) for k, v in s.capacity.items()}}
                      for s in self.slots],
            "binding": None if self.binding is None else
            {"slot": self.binding[0], "task": self.binding[1], "mixed": self.binding[2]},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def predict(dataflow: Dataflow, mapping: MappingPlan, models: Mapping[str, TaskPerfModel],
            cluster: Cluster, omega: float | None = None) -> Prediction:
    """Full prediction report; utilization is evaluated at ``omega`` (default: the predicted rate)."""
    rate = predict_rate(dataflow, mapping, models, cluster)
    at = rate if omega is None else omega
    if not math.isfinite(at):
        at = 0.0
    loads = slot_loads(dataflow, mapping, models, at, cluster)
    rates = {(l.slot, t): r for l in loads for t, r in l.incoming.items()}
    vms = utilization_at(dataflow, mapping, models, cluster, rates)
    bind = binding_groups(dataflow, mapping, models, cluster)
    binding = (str(bind[0][0]), bind[0][1], bind[0][3]) if bind else None
    if binding and binding[2]:
        log.info("prediction is bound by mixed slot %s (task %s)", binding[0], binding[1])
    return Prediction(rate, at, vms, loads, binding)
