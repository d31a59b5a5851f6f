"""Dataflow DAG model, validation, and input-rate propagation."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

SOURCE_RESOURCES = (10.0, 15.0, 1)
SINK_RESOURCES = (10.0, 20.0, 1)


class DagError(ValueError):
    """Raised when a dataflow is malformed."""


@dataclass(frozen=True)
class FixedResources:
    cpu: float
    mem: float
    threads: int = 1


@dataclass(frozen=True)
class TaskDef:
    id: str
    kind: str
    is_source: bool = False
    is_sink: bool = False
    fixed: FixedResources | None = None


@dataclass(frozen=True)
class StreamEdge:
    src: str
    dst: str
    selectivity: Fraction = Fraction(1)


@dataclass
class Dataflow:
    tasks: list[TaskDef]
    edges: list[StreamEdge] = field(default_factory=list)

    def task(self, task_id: str) -> TaskDef:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)

    @property
    def ids(self) -> list[str]:
        return [t.id for t in self.tasks]

    def in_edges(self, task_id: str) -> list[StreamEdge]:
        return [e for e in self.edges if e.dst == task_id]

    def out_edges(self, task_id: str) -> list[StreamEdge]:
        return [e for e in self.edges if e.src == task_id]

    def roots(self) -> list[str]:
        """Tasks without incoming edges; they receive the DAG input rate."""
        targets = {e.dst for e in self.edges}
        return [t.id for t in self.tasks if t.id not in targets]


def parse_selectivity(value) -> Fraction:
    """Accept ``0.5``, ``"0.5"``, ``"1:2"`` or a Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str) and ":" in value:
        num, den = value.split(":", 1)
        return Fraction(int(num), int(den))
    # limit_denominator keeps decimal literals like 0.1 exact
    return Fraction(str(value)).limit_denominator(10**6)


def _find_cycle(dataflow: Dataflow) -> list[str] | None:
    succ: dict[str, list[str]] = {t: [] for t in dataflow.ids}
    for e in dataflow.edges:
        if e.src in succ and e.dst in succ and e.src != e.dst:
            succ[e.src].append(e.dst)
    color = {t: 0 for t in succ}
    stack_path: list[str] = []

    def visit(node: str) -> list[str] | None:
        color[node] = 1
        stack_path.append(node)
        for nxt in sorted(succ[node]):
            if color[nxt] == 1:
                return stack_path[stack_path.index(nxt):] + [nxt]
            if color[nxt] == 0:
                found = visit(nxt)
                if found:
                    return found
        stack_path.pop()
        color[node] = 2
        return None

    for node in sorted(succ):
        if color[node] == 0:
            found = visit(node)
            if found:
                return found
    return None


def validate(dataflow: Dataflow) -> list[str]:
    """Return human-readable violations; an empty list means the DAG is valid."""
    problems: list[str] = []
    seen: set[str] = set()
    for t in dataflow.tasks:
        if t.id in seen:
            problems.append(f"duplicate task id {t.id}")
        seen.add(t.id)
        if t.fixed is not None and t.fixed.threads < 1:
            problems.append(f"fixed thread count < 1 at {t.id}")
    if not dataflow.tasks:
        problems.append("dataflow has no tasks")
        return problems
    for e in dataflow.edges:
        if e.src == e.dst:
            problems.append(f"self-loop at {e.src}")
        for end in (e.src, e.dst):
            if end not in seen:
                problems.append(f"edge {e.src}->{e.dst} references unknown task {end}")
        if e.selectivity <= 0:
            problems.append(f"non-positive selectivity on edge {e.src}->{e.dst}")
    cycle = _find_cycle(dataflow)
    if cycle:
        problems.append("cycle detected: " + "->".join(cycle))
    has_in = {e.dst for e in dataflow.edges}
    has_out = {e.src for e in dataflow.edges}
    if not any(t not in has_in for t in seen):
        problems.append("no source task (every task has an in-edge)")
    if not any(t not in has_out for t in seen):
        problems.append("no sink task (every task has an out-edge)")
    return problems


def topo_order(dataflow: Dataflow) -> list[str]:
    """Kahn's algorithm with ties broken by ascending task id."""
    indeg = {t: 0 for t in dataflow.ids}
    succ: dict[str, list[str]] = {t: [] for t in dataflow.ids}
    for e in dataflow.edges:
        indeg[e.dst] += 1
        succ[e.src].append(e.dst)
    ready = [t for t, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for nxt in succ[node]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(order) != len(indeg):
        stuck = sorted(t for t, d in indeg.items() if d > 0)
        raise DagError(f"cycle detected involving task {stuck[0]}")
    return order


def get_rate(dataflow: Dataflow, omega: float) -> dict[str, float]:
    """Input rate of every task when the DAG receives ``omega`` tuples/sec."""
    if omega < 0:
        raise ValueError("omega must be non-negative")
    problems = validate(dataflow)
    if problems:
        raise DagError("; ".join(problems))
    rates: dict[str, float] = {}
    incoming: dict[str, list[StreamEdge]] = {t: [] for t in dataflow.ids}
    for e in dataflow.edges:
        incoming[e.dst].append(e)
    for tid in topo_order(dataflow):
        edges = incoming[tid]
        if not edges:
            rates[tid] = float(omega)
        else:
            rates[tid] = sum(rates[e.src] * float(e.selectivity) for e in edges)
    return rates


# ---------------------------------------------------------------- builtins

BUILTIN_KINDS = ("linear", "diamond", "star")
# Default vertex labels (t1..t5) per micro-DAG; Blob always sees the DAG rate.
DEFAULT_TASK_KINDS = {
    "linear": ("parse-xml", "pi", "batch-file-write", "azure-blob", "azure-table"),
    "diamond": ("parse-xml", "pi", "azure-blob", "azure-table", "batch-file-write"),
    "star": ("azure-blob", "azure-table", "parse-xml", "pi", "batch-file-write"),
}


def _with_endpoints(inner: list[TaskDef], edges: list[tuple[str, str]], heads, tails) -> Dataflow:
    src_cpu, src_mem, src_thr = SOURCE_RESOURCES
    snk_cpu, snk_mem, snk_thr = SINK_RESOURCES
    tasks = [TaskDef("source", "source", is_source=True,
                     fixed=FixedResources(src_cpu, src_mem, src_thr))]
    tasks += inner
    tasks.append(TaskDef("sink", "sink", is_sink=True,
                         fixed=FixedResources(snk_cpu, snk_mem, snk_thr)))
    all_edges = [("source", h) for h in heads] + edges + [(t, "sink") for t in tails]
    return Dataflow(tasks, [StreamEdge(a, b, Fraction(1)) for a, b in all_edges])


def builtin_dag(kind: str, task_kinds: Iterable[str] | None = None) -> Dataflow:
    """Canonical Linear / Diamond / Star micro-DAG over five modeled tasks.

    Vertices are named ``t1``..``t5``; ``task_kinds[i]`` is the model id for
    ``t{i+1}``.  Source and sink carry static resources.
    """
    if kind not in BUILTIN_KINDS:
        raise DagError(f"unknown builtin DAG {kind!r}; expected one of {BUILTIN_KINDS}")
    kinds = list(task_kinds if task_kinds is not None else DEFAULT_TASK_KINDS[kind])
    if len(kinds) != 5:
        raise DagError(f"micro-DAGs need exactly 5 task kinds, got {len(kinds)}")
    inner = [TaskDef(f"t{i + 1}", k) for i, k in enumerate(kinds)]
    if kind == "linear":
        edges = [("t1", "t2"), ("t2", "t3"), ("t3", "t4"), ("t4", "t5")]
        return _with_endpoints(inner, edges, ["t1"], ["t5"])
    if kind == "diamond":
        edges = [("t1", "t2"), ("t1", "t3"), ("t1", "t4"),
                 ("t2", "t5"), ("t3", "t5"), ("t4", "t5")]
        return _with_endpoints(inner, edges, ["t1"], ["t5"])
    # star: t1, t2 feed the hub t3, which feeds t4 and t5
    edges = [("t1", "t3"), ("t2", "t3"), ("t3", "t4"), ("t3", "t5")]
    return _with_endpoints(inner, edges, ["t1", "t2"], ["t4", "t5"])


# ---------------------------------------------------------------- file I/O

def dataflow_from_dict(doc: dict) -> Dataflow:
    tasks = []
    for t in doc["tasks"]:
        fixed = t.get("fixed")
        tasks.append(TaskDef(
            id=t["id"],
            kind=t.get("kind", t["id"]),
            is_source=bool(t.get("source", False)),
            is_sink=bool(t.get("sink", False)),
            fixed=FixedResources(float(fixed["cpu"]), float(fixed["mem"]),
                                 int(fixed.get("threads", 1))) if fixed else None,
        ))
    edges = [StreamEdge(e["from"], e["to"], parse_selectivity(e.get("selectivity", 1)))
             for e in doc.get("edges", [])]
    return Dataflow(tasks, edges)


def dataflow_to_dict(dataflow: Dataflow) -> dict:
    tasks = []
    for t in dataflow.tasks:
        entry: dict = {"id": t.id, "kind": t.kind}
        if t.is_source:
            entry["source"] = True
        if t.is_sink:
            entry["sink"] = True
        if t.fixed is not None:
            entry["fixed"] = {"cpu": t.fixed.cpu, "mem": t.fixed.mem, "threads": t.fixed.threads}
        tasks.append(entry)
    edges = []
    for e in dataflow.edges:
        sel = e.selectivity
        edges.append({"from": e.src, "to": e.dst,
                      "selectivity": f"{sel.numerator}:{sel.denominator}"})
    return {"tasks": tasks, "edges": edges}


def load_dataflow(path: str | Path) -> Dataflow:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        return dataflow_from_dict(doc)
    except (KeyError, TypeError, AttributeError) as exc:
        raise DagError(f"{path}: malformed dataflow document ({exc!r})") from None
