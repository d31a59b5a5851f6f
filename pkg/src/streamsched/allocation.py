"""Thread and resource allocation: linear scaling (LSA) and model based (MBA)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .dag import Dataflow, get_rate
from .perfmodel import ModelError, TaskPerfModel

_EPS = 1e-9


@dataclass(frozen=True)
class TaskAllocation:
    task: str
    threads: int
    cpu: float
    mem: float
    bundles: int = 0  # full slots claimed by MBA


@dataclass
class AllocationPlan:
    algorithm: str
    omega: float
    rho: int
    tasks: dict[str, TaskAllocation]

    @property
    def total_cpu(self) -> float:
        return sum(a.cpu for a in self.tasks.values())

    @property
    def total_mem(self) -> float:
        return sum(a.mem for a in self.tasks.values())

    @property
    def total_threads(self) -> int:
        return sum(a.threads for a in self.tasks.values())

    def to_dict(self) -> dict:
        return {"algorithm": self.algorithm, "omega": self.omega, "rho": self.rho,
                "tasks": [{"id": a.task, "threads": a.threads, "cpu": a.cpu, "mem": a.mem,
                           "bundles": a.bundles} for a in self.tasks.values()]}

    @classmethod
    def from_dict(cls, doc: dict) -> "AllocationPlan":
        tasks = {t["id"]: TaskAllocation(t["id"], int(t["threads"]), float(t["cpu"]),
                                         float(t["mem"]), int(t.get("bundles", 0)))
                 for t in doc["tasks"]}
        return cls(doc["algorithm"], float(doc["omega"]), int(doc["rho"]), tasks)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "AllocationPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def slot_count(allocations: Iterable[TaskAllocation]) -> int:
    """Slots needed to hold the summed CPU% and mem% (percent of one slot)."""
    allocations = list(allocations)
    cpu = sum(a.cpu for a in allocations) / 100.0
    mem = sum(a.mem for a in allocations) / 100.0
    rho = max(math.ceil(cpu - _EPS), math.ceil(mem - _EPS))
    return max(1, rho) if allocations else 0


def _split(omega: float, unit: float) -> tuple[int, float]:
    """Whole multiples of ``unit`` in ``omega`` and the trailing remainder."""
    k = math.floor(omega / unit + _EPS)
    rem = omega - k * unit
    if rem < _EPS * max(1.0, unit):
        rem = 0.0
    return k, max(rem, 0.0)


def _model_for(models: Mapping[str, TaskPerfModel], kind: str, task: str) -> TaskPerfModel:
    try:
        return models[kind]
    except KeyError:
        raise ModelError(f"no performance model for task {task} (kind {kind})") from None


def lsa_task(model: TaskPerfModel, omega: float) -> tuple[int, float, float]:
    if omega <= 0:
        return 1, 0.0, 0.0
    rate1 = model.peak_rate(1)
    c1, m1 = model.resources(1)
    k, rem = _split(omega, rate1)
    threads, cpu, mem = k, k * c1, k * m1
    if rem > 0:
        threads += 1
        cpu += c1 * rem / rate1
        mem += m1 * rem / rate1
    return threads, cpu, mem


def mba_task(model: TaskPerfModel, omega: float) -> tuple[int, float, float, int]:
    if omega <= 0:
        return 1, 0.0, 0.0, 0
    omega_hat, tau_hat = model.max_peak()
    k, rem = _split(omega, omega_hat)
    threads, cpu, mem = k * tau_hat, 100.0 * k, 100.0 * k
    if rem > 0:
        q = model.threads_for_rate(rem)
        assert q is not None, "residual below the best peak is always coverable"
        threads += q
        if q > 1:
            c, m = model.resources(q)
        else:
            c1, m1 = model.resources(1)
            scale = rem / model.peak_rate(1)
            c, m = c1 * scale, m1 * scale
        cpu += c
        mem += m
    return threads, cpu, mem, k


def _allocate(algorithm: str, dataflow: Dataflow, omega: float,
              models: Mapping[str, TaskPerfModel]) -> AllocationPlan:
    rates = get_rate(dataflow, omega)
    tasks: dict[str, TaskAllocation] = {}
    for t in dataflow.tasks:
        if t.fixed is not None:
            tasks[t.id] = TaskAllocation(t.id, t.fixed.threads, t.fixed.cpu, t.fixed.mem)
            continue
        model = _model_for(models, t.kind, t.id)
        if algorithm == "LSA":
            threads, cpu, mem = lsa_task(model, rates[t.id])
            tasks[t.id] = TaskAllocation(t.id, threads, cpu, mem)
        else:
            threads, cpu, mem, k = mba_task(model, rates[t.id])
            tasks[t.id] = TaskAllocation(t.id, threads, cpu, mem, k)
    return AllocationPlan(algorithm, float(omega), slot_count(tasks.values()), tasks)


def allocate_lsa(dataflow: Dataflow, omega: float,
                 models: Mapping[str, TaskPerfModel]) -> AllocationPlan:
    """Scale the single-thread peak rate and resources linearly."""
    return _allocate("LSA", dataflow, omega, models)


def allocate_mba(dataflow: Dataflow, omega: float,
                 models: Mapping[str, TaskPerfModel]) -> AllocationPlan:
    """Fill whole slots with the best-throughput thread bundle, then size the remainder."""
    return _allocate("MBA", dataflow, omega, models)


ALLOCATORS = {"LSA": allocate_lsa, "MBA": allocate_mba}


def allocate(algorithm: str, dataflow: Dataflow, omega: float,
             models: Mapping[str, TaskPerfModel]) -> AllocationPlan:
    try:
        fn = ALLOCATORS[algorithm.upper()]
    except KeyError:
        raise ValueError(f"unknown allocator {algorithm!r}") from None
    return fn(dataflow, omega, models)
