"""Per-task performance models: thread count -> (peak rate, CPU%, mem%) on one slot."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

LATENCY_SLOPE_MAX = 0.001
RATE_SLOPE_MIN = -0.001
SLOPE_WINDOW = 3
THREAD_SCHEDULE = (1, 2, 3, 5, 7, 10, 15, 20, 30, 40, 50, 60, 70, 80, 90, 100)

_EPS = 1e-9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelPoint:
    threads: int
    peak_rate: float
    cpu: float
    mem: float


@dataclass
class TaskPerfModel:
    kind: str
    points: list[ModelPoint]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.threads)
        threads = [p.threads for p in self.points]
        if any(b <= a for a, b in zip(threads, threads[1:])):
            raise ModelError(f"{self.kind}: thread counts must be strictly increasing")
        if any(t < 1 for t in threads):
            raise ModelError(f"{self.kind}: thread counts must be >= 1")
        self._q = np.array(threads, dtype=float)
        self._rate = np.array([p.peak_rate for p in self.points], dtype=float)
        self._cpu = np.array([p.cpu for p in self.points], dtype=float)
        self._mem = np.array([p.mem for p in self.points], dtype=float)

    @property
    def max_threads(self) -> int:
        return self.points[-1].threads

    def _check(self, q: float) -> None:
        if not self.points:
            raise ModelError(f"{self.kind}: empty model")
        if q < 1:
            raise ValueError("thread count must be >= 1")

    def peak_rate(self, q: float) -> float:
        """Peak stable rate with ``q`` threads (linear between knots, clamped)."""
        self._check(q)
        return float(np.interp(q, self._q, self._rate))

    def resources(self, q: float) -> tuple[float, float]:
        """(CPU%, mem%) used by ``q`` threads at their peak rate."""
        self._check(q)
        return float(np.interp(q, self._q, self._cpu)), float(np.interp(q, self._q, self._mem))

    def threads_for_rate(self, omega: float) -> int | None:
        """Smallest integer thread count whose peak rate covers ``omega``."""
        if not self.points:
            raise ModelError(f"{self.kind}: empty model")
        if omega <= 0:
            return 1
        qs = np.arange(1, self.max_threads + 1, dtype=float)
        ok = np.nonzero(np.interp(qs, self._q, self._rate) >= omega - _EPS * max(1.0, omega))[0]
        return int(ok[0]) + 1 if ok.size else None

    def max_peak(self) -> tuple[float, int]:
        """(best peak rate over any thread count, smallest thread count reaching it)."""
        if not self.points:
            raise ModelError(f"{self.kind}: empty model")
        omega_hat = float(self._rate.max())
        tau_hat = self.threads_for_rate(omega_hat)
        assert tau_hat is not None
        return omega_hat, tau_hat

    # ------------------------------------------------------------ persistence
    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "points": [{"threads": p.threads, "peak_rate": p.peak_rate, "cpu": p.cpu, "mem": p.mem}
                       for p in self.points],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TaskPerfModel":
        pts = [ModelPoint(int(p["threads"]), float(p["peak_rate"]), float(p["cpu"]), float(p["mem"]))
               for p in doc["points"]]
        if not pts:
            raise ModelError(f"{doc.get('kind')}: empty model")
        return cls(doc["kind"], pts, dict(doc.get("provenance", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TaskPerfModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -------------------------------------------------------------------- fixtures

FIXTURE_IDS = ("parse-xml", "pi", "batch-file-write", "azure-blob", "azure-table")


def load_fixture(kind: str) -> TaskPerfModel:
    try:
        text = resources.files("streamsched.fixtures").joinpath(f"{kind}.json").read_text()
    except FileNotFoundError:
        raise ModelError(f"no shipped fixture named {kind!r}") from None
    return TaskPerfModel.from_dict(json.loads(text))


def fixture_models() -> dict[str, TaskPerfModel]:
    return {k: load_fixture(k) for k in FIXTURE_IDS}


def load_models(directory: str | Path | None = None) -> dict[str, TaskPerfModel]:
    """Shipped fixtures, overridden by any ``*.json`` model files in ``directory``."""
    models = fixture_models()
    if directory is not None:
        for path in sorted(Path(directory).glob("*.json")):
            m = TaskPerfModel.load(path)
            models[m.kind] = m
    return models


# ------------------------------------------------------------------ stability

@dataclass(frozen=True)
class StabilityVerdict:
    slope: float
    stable: bool


def ls_slope(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    denom = float(np.dot(xc, xc))
    if denom == 0.0:
        return 0.0
    return float(np.dot(xc, y - y.mean()) / denom)


def detect_stability(latency_series: Iterable[tuple[float, float]], warmup: float = 0.0,
                     lambda_max: float = LATENCY_SLOPE_MAX) -> StabilityVerdict:
    """Least-squares latency slope over samples at or after ``warmup``."""
    arr = np.asarray(list(latency_series), dtype=float).reshape(-1, 2)
    arr = arr[arr[:, 0] >= warmup]
    if len(arr) < 2:
        raise ValueError("need at least 2 latency samples past warm-up")
    slope = ls_slope(arr[:, 0], arr[:, 1])
    return StabilityVerdict(slope, slope <= lambda_max)


# -------------------------------------------------------------------- builder

@dataclass
class TrialResult:
    cpu: float
    mem: float
    is_stable: bool
    latency_series: list[tuple[float, float]] = field(default_factory=list)


TrialRunner = Callable[[int, float], TrialResult]


def _thread_steps(delta_tau: int | None, tau_max: int):
    if delta_tau is None:
        for t in THREAD_SCHEDULE:
            if t >= tau_max:
                return
            yield t
        return
    t = 1
    while t < tau_max:
        yield t
        t += delta_tau


def build_model(runner: TrialRunner, kind: str = "task", delta_tau: int | None = None,
                delta_omega: float | None = None, tau_max: int = 100,
                omega_max: float = 1e6, lambda_omega_min: float = RATE_SLOPE_MIN,
                window: int = SLOPE_WINDOW) -> TaskPerfModel:
    """Sweep thread counts and input rates with ``runner`` and record peak stable rates.

    For each thread count the rate starts at 1 and grows by ``delta_omega``
    (default: 5% of the last stable rate, at least 1) until a trial is
    unstable or ``omega_max`` is passed.  Thread counts stop growing at
    ``tau_max`` or once the trailing ``window`` of peak rates has a slope no
    higher than ``|lambda_omega_min|`` (flat or falling).
    """
    points: dict[int, ModelPoint] = {}
    stop_reason = "tau_max"
    for tau in _thread_steps(delta_tau, tau_max):
        omega = 1.0
        best: ModelPoint | None = None
        while omega <= omega_max:
            res = runner(tau, omega)
            if not res.is_stable or res.cpu > 100.0 or res.mem > 100.0:
                break
            best = ModelPoint(tau, omega, res.cpu, res.mem)
            step = delta_omega if delta_omega is not None else max(1.0, 0.05 * omega)
            omega += step
        if best is None:
            if tau == 1:
                raise ModelError(f"{kind}: unstable at 1 thread and rate 1; cannot model")
            log.info("%s: no stable rate at %d threads; stopping", kind, tau)
            stop_reason = "unstable"
            break
        points[tau] = best
        ordered = sorted(points)
        if len(ordered) >= window:
            tail = ordered[-window:]
            slope = ls_slope(tail, [points[t].peak_rate for t in tail])
            if slope <= abs(lambda_omega_min):
                stop_reason = "rate_slope"
                break
    return TaskPerfModel(kind, list(points.values()),
                         {"source": "build_model", "stop_reason": stop_reason,
                          "delta_omega": delta_omega, "delta_tau": delta_tau, "tau_max": tau_max})


def synthetic_runner(capacity: Callable[[int], float], cpu_per_thread: float = 5.0,
                     mem_per_thread: float = 2.0) -> TrialRunner:
    """Trial runner for a task whose stable capacity with ``tau`` threads is ``capacity(tau)``."""

    def run(tau: int, omega: float) -> TrialResult:
        cap = capacity(tau)
        load = min(1.0, omega / cap) if cap > 0 else 1.0
        cpu = min(100.0, cpu_per_thread * tau) * load
        mem = min(100.0, mem_per_thread * tau)
        return TrialResult(cpu, mem, omega <= cap)

    return run


def model_from_capacity(kind: str, capacity: Callable[[int], float], tau_max: int,
                        cpu_per_thread: float = 5.0, mem_per_thread: float = 2.0) -> TaskPerfModel:
    """Exact model sampled from an analytic capacity curve at every thread count."""
    run = synthetic_runner(capacity, cpu_per_thread, mem_per_thread)
    pts = []
    for tau in range(1, tau_max + 1):
        res = run(tau, capacity(tau))
        pts.append(ModelPoint(tau, float(capacity(tau)), res.cpu, res.mem))
    return TaskPerfModel(kind, pts, {"source": "analytic"})


def linear_cap(per_thread: float) -> Callable[[int], float]:
    return lambda tau: per_thread * tau


def flat_cap(value: float) -> Callable[[int], float]:
    return lambda tau: value


def bell_cap(peak: float, peak_threads: int, base: float) -> Callable[[int], float]:
    """Rises linearly from ``base`` at 1 thread to ``peak`` then decays."""

    def cap(tau: int) -> float:
        if tau <= peak_threads:
            return base + (peak - base) * (tau - 1) / max(1, peak_threads - 1)
        return peak * math.exp(-(tau - peak_threads) / peak_threads)

    return cap
