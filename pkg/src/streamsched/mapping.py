"""VM acquisition and thread-to-slot mapping (round robin, resource distance, slot aware)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .allocation import AllocationPlan
from .dag import Dataflow, topo_order
from .perfmodel import TaskPerfModel

_EPS = 1e-9


class InsufficientResources(RuntimeError):
    def __init__(self, task: str, algorithm: str = ""):
        super().__init__(f"insufficient resources for task {task}"
                         + (f" ({algorithm})" if algorithm else ""))
        self.task = task
        self.algorithm = algorithm


# ---------------------------------------------------------------- cluster

@dataclass(frozen=True)
class VmSpec:
    size: str
    slots: int
    price_per_hour: float = 0.0


D_SERIES = (VmSpec("D1", 1, 0.098), VmSpec("D2", 2, 0.196),
            VmSpec("D3", 4, 0.392), VmSpec("D4", 8, 0.784))
# sizes used for the experiments
DEFAULT_CATALOG = D_SERIES[:3]


@dataclass(frozen=True)
class Vm:
    id: str
    spec: VmSpec
    rack: str = "rack0"


@dataclass(frozen=True, order=True)
class Slot:
    vm: str
    index: int

    def __str__(self) -> str:
        return f"{self.vm}/s{self.index}"


@dataclass
class Cluster:
    vms: list[Vm]

    @property
    def slots(self) -> list[Slot]:
        return [Slot(vm.id, i) for vm in self.vms for i in range(1, vm.spec.slots + 1)]

    @property
    def total_slots(self) -> int:
        return sum(vm.spec.slots for vm in self.vms)

    def vm(self, vm_id: str) -> Vm:
        for vm in self.vms:
            if vm.id == vm_id:
                return vm
        raise KeyError(vm_id)

    @property
    def price_per_hour(self) -> float:
        return sum(vm.spec.price_per_hour for vm in self.vms)

    def to_dict(self) -> dict:
        return {"vms": [{"id": v.id, "size": v.spec.size, "slots": v.spec.slots,
                         "price": v.spec.price_per_hour, "rack": v.rack} for v in self.vms]}

    @classmethod
    def from_dict(cls, doc: dict) -> "Cluster":
        return cls([Vm(v["id"], VmSpec(v.get("size", f"{v['slots']}-slot"), int(v["slots"]),
                                      float(v.get("price", 0.0))), v.get("rack", "rack0"))
                    for v in doc["vms"]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Cluster":
        return cls.from_dict(json.loads(Path(path).read_text()))


def acquire_vms(rho: int, catalog: Sequence[VmSpec] = DEFAULT_CATALOG) -> Cluster:
    """As many of the largest VMs as fit in ``rho``, then the smallest VM covering the rest."""
    if rho < 1:
        raise ValueError("rho must be >= 1")
    if not catalog:
        raise ValueError("empty VM catalog")
    by_size = sorted(catalog, key=lambda s: (s.slots, s.price_per_hour))
    largest = by_size[-1]
    n, rest = divmod(rho, largest.slots)
    specs = [largest] * n
    if rest:
        specs.append(next(s for s in by_size if s.slots >= rest))
    return Cluster([Vm(f"vm{i + 1}", s) for i, s in enumerate(specs)])


# ---------------------------------------------------------------- plans

@dataclass(frozen=True, order=True)
class ThreadId:
    task: str
    ordinal: int

    def __str__(self) -> str:
        return f"{self.task}#{self.ordinal}"


@dataclass
class MappingPlan:
    algorithm: str
    assignment: dict[ThreadId, Slot]
    extra_slots: int = 0
    # (slot, task) -> (cpu%, mem%) reserved by a resource-aware mapper
    grants: dict[tuple[Slot, str], tuple[float, float]] = field(default_factory=dict)

    def slot_composition(self) -> dict[Slot, dict[str, int]]:
        comp: dict[Slot, dict[str, int]] = {}
        for th, slot in sorted(self.assignment.items()):
            comp.setdefault(slot, {})
            comp[slot][th.task] = comp[slot].get(th.task, 0) + 1
        return comp

    def threads_per_slot(self) -> dict[Slot, int]:
        return {s: sum(c.values()) for s, c in self.slot_composition().items()}

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "extra_slots": self.extra_slots,
            "assignments": [{"task": th.task, "ordinal": th.ordinal, "vm": s.vm, "slot": s.index}
                            for th, s in sorted(self.assignment.items())],
            "grants": [{"vm": s.vm, "slot": s.index, "task": t, "cpu": c, "mem": m}
                       for (s, t), (c, m) in sorted(self.grants.items())],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MappingPlan":
        assignment = {ThreadId(a["task"], int(a["ordinal"])): Slot(a["vm"], int(a["slot"]))
                      for a in doc["assignments"]}
        grants = {(Slot(g["vm"], int(g["slot"])), g["task"]): (float(g["cpu"]), float(g["mem"]))
                  for g in doc.get("grants", [])}
        return cls(doc["algorithm"], assignment, int(doc.get("extra_slots", 0)), grants)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MappingPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def enumerate_threads(dataflow: Dataflow, allocation: AllocationPlan) -> list[ThreadId]:
    """All threads, task by task in topological order, ordinals ascending."""
    return [ThreadId(tid, k) for tid in topo_order(dataflow)
            for k in range(1, allocation.tasks[tid].threads + 1)]


def single_thread_footprint(dataflow: Dataflow, models: Mapping[str, TaskPerfModel],
                            task_id: str) -> tuple[float, float]:
    t = dataflow.task(task_id)
    if t.fixed is not None:
        return t.fixed.cpu / t.fixed.threads, t.fixed.mem / t.fixed.threads
    return models[t.kind].resources(1)


# ---------------------------------------------------------------- DSM

def map_dsm(threads: Sequence[ThreadId], cluster: Cluster) -> MappingPlan:
    """Round robin over the slots in VM order."""
    slots = cluster.slots
    return MappingPlan("DSM", {th: slots[n % len(slots)] for n, th in enumerate(threads)})


# ---------------------------------------------------------------- RSM

def nw_dist(cluster: Cluster, ref_vm: str, vm_id: str) -> float:
    if vm_id == ref_vm:
        return 0.0
    return 0.5 if cluster.vm(vm_id).rack == cluster.vm(ref_vm).rack else 1.0


def rsm_distance(cpu_avail: float, mem_avail: float, cpu_need: float, mem_need: float,
                 nw: float, weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> float:
    """Weighted squared resource gap plus network multiplier; resources in slot units (1.0 = one slot)."""
    w_c, w_m, w_n = weights
    return w_m * (mem_avail - mem_need) ** 2 + w_c * (cpu_avail - cpu_need) ** 2 + w_n * nw


def map_rsm(dataflow: Dataflow, allocation: AllocationPlan, cluster: Cluster,
            models: Mapping[str, TaskPerfModel],
            weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> MappingPlan:
    """One thread per task per sweep onto the nearest VM with room for it."""
    order = topo_order(dataflow)
    foot = {t: single_thread_footprint(dataflow, models, t) for t in order}
    pending = {t: allocation.tasks[t].threads for t in order}
    next_ordinal = {t: 1 for t in order}
    vm_cpu = {vm.id: 100.0 * vm.spec.slots for vm in cluster.vms}
    vm_mem = dict(vm_cpu)
    slot_mem = {s: 100.0 for s in cluster.slots}
    slots_of = {vm.id: [s for s in cluster.slots if s.vm == vm.id] for vm in cluster.vms}
    vm_rank = {vm.id: i for i, vm in enumerate(cluster.vms)}
    ref = cluster.vms[0].id
    assignment: dict[ThreadId, Slot] = {}
    grants: dict[tuple[Slot, str], tuple[float, float]] = {}

    while any(pending.values()):
        for t in order:
            if not pending[t]:
                continue
            c, m = foot[t]
            ranked = sorted(cluster.vms, key=lambda v: (
                rsm_distance(vm_cpu[v.id] / 100, vm_mem[v.id] / 100, c / 100, m / 100,
                             nw_dist(cluster, ref, v.id), weights), vm_rank[v.id]))
            chosen = None
            for vm in ranked:
                if vm_cpu[vm.id] + _EPS < c:
                    continue
                chosen = next((s for s in slots_of[vm.id] if slot_mem[s] + _EPS >= m), None)
                if chosen is not None:
                    break
            if chosen is None:
                raise InsufficientResources(t, "RSM")
            assignment[ThreadId(t, next_ordinal[t])] = chosen
            next_ordinal[t] += 1
            pending[t] -= 1
            vm_cpu[chosen.vm] -= c
            vm_mem[chosen.vm] -= m
            slot_mem[chosen] -= m
            gc, gm = grants.get((chosen, t), (0.0, 0.0))
            grants[(chosen, t)] = (gc + c, gm + m)
            ref = chosen.vm
    return MappingPlan("RSM", assignment, grants=grants)


# ---------------------------------------------------------------- SAM

def bundle_size(dataflow: Dataflow, models: Mapping[str, TaskPerfModel], task_id: str) -> float:
    """Threads in a full bundle; fixed-resource tasks never form one."""
    t = dataflow.task(task_id)
    if t.fixed is not None:
        return math.inf
    return models[t.kind].max_peak()[1]


def map_sam(dataflow: Dataflow, allocation: AllocationPlan, cluster: Cluster,
            models: Mapping[str, TaskPerfModel]) -> MappingPlan:
    """Full bundles get exclusive empty slots; each task's leftover threads go to the best-fitting slot.

    The number of full bundles per task is the count MBA charged as whole
    slots (``TaskAllocation.bundles``).

    A leftover bundle with no fitting partly used slot takes an empty slot
    and only consumes its own share of it.
    """
    if allocation.algorithm != "MBA":
        raise ValueError("slot-aware mapping needs an MBA allocation")
    order = topo_order(dataflow)
    tau_hat = {t: bundle_size(dataflow, models, t) for t in order}
    pending = {t: allocation.tasks[t].threads for t in order}
    # only the bundles MBA charged as whole slots are placed as full bundles
    bundles = {t: allocation.tasks[t].bundles for t in order}
    need = {t: [allocation.tasks[t].cpu, allocation.tasks[t].mem] for t in order}
    next_ordinal = {t: 1 for t in order}
    slots = cluster.slots
    vm_rank = {vm.id: i for i, vm in enumerate(cluster.vms)}
    cpu = {s: 100.0 for s in slots}
    mem = {s: 100.0 for s in slots}
    used: set[Slot] = set()
    assignment: dict[ThreadId, Slot] = {}
    grants: dict[tuple[Slot, str], tuple[float, float]] = {}
    current = cluster.vms[0].id

    def next_empty_slot() -> Slot | None:
        start = vm_rank[current]
        ranked = sorted(slots, key=lambda s: ((vm_rank[s.vm] - start) % len(cluster.vms), s.index))
        return next((s for s in ranked if s not in used), None)

    def place(t: str, count: int, slot: Slot, c: float, m: float) -> None:
        nonlocal current
        for _ in range(count):
            assignment[ThreadId(t, next_ordinal[t])] = slot
            next_ordinal[t] += 1
        pending[t] -= count
        cpu[slot] -= c
        mem[slot] -= m
        gc, gm = grants.get((slot, t), (0.0, 0.0))
        grants[(slot, t)] = (gc + c, gm + m)
        used.add(slot)
        current = slot.vm

    while any(pending.values()):
        for t in order:
            if pending[t] <= 0:
                continue
            if bundles[t] > 0 and pending[t] >= tau_hat[t]:
                slot = next_empty_slot()
                if slot is None:
                    raise InsufficientResources(t, "SAM")
                place(t, int(tau_hat[t]), slot, 100.0, 100.0)
                bundles[t] -= 1
                need[t][0] = max(0.0, need[t][0] - 100.0)
                need[t][1] = max(0.0, need[t][1] - 100.0)
                continue
            c, m = need[t]
            fits = [s for s in slots if s in used and cpu[s] + _EPS >= c and mem[s] + _EPS >= m
                    and (cpu[s] > _EPS or mem[s] > _EPS)]
            if fits:
                slot = min(fits, key=lambda s: (cpu[s] + mem[s], vm_rank[s.vm], s.index))
            else:
                slot = next_empty_slot()
                if slot is None:
                    raise InsufficientResources(t, "SAM")
            place(t, pending[t], slot, c, m)
            need[t] = [0.0, 0.0]
    return MappingPlan("SAM", assignment, grants=grants)


# ---------------------------------------------------------------- driver

Mapper = Callable[[Dataflow, AllocationPlan, Cluster], MappingPlan]


def make_mapper(name: str, models: Mapping[str, TaskPerfModel],
                weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Mapper:
    name = name.upper()
    if name == "DSM":
        return lambda g, a, c: map_dsm(enumerate_threads(g, a), c)
    if name == "RSM":
        return lambda g, a, c: map_rsm(g, a, c, models, weights)
    if name == "SAM":
        return lambda g, a, c: map_sam(g, a, c, models)
    raise ValueError(f"unknown mapper {name!r}")


def map_with_retry(map_fn: Mapper, dataflow: Dataflow, allocation: AllocationPlan,
                   catalog: Sequence[VmSpec] = DEFAULT_CATALOG,
                   max_extra: int = 10) -> tuple[MappingPlan, Cluster]:
    """Map onto ``rho`` slots, adding one slot at a time after each resource failure."""
    if max_extra < 0:
        raise ValueError("max_extra must be >= 0")
    last: InsufficientResources | None = None
    for extra in range(max_extra + 1):
        cluster = acquire_vms(allocation.rho + extra, catalog)
        try:
            plan = map_fn(dataflow, allocation, cluster)
        except InsufficientResources as exc:
            last = exc
            continue
        plan.extra_slots = extra
        return plan, cluster
    assert last is not None
    raise last
