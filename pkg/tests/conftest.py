from fractions import Fraction

import pytest

from streamsched.dag import Dataflow, StreamEdge, TaskDef
from streamsched.perfmodel import ModelPoint, TaskPerfModel, fixture_models


@pytest.fixture(scope="session")
def models():
    return fixture_models()


def chain(*ids: str, kinds=None) -> Dataflow:
    kinds = kinds or {}
    tasks = [TaskDef(t, kinds.get(t, t)) for t in ids]
    return Dataflow(tasks, [StreamEdge(a, b, Fraction(1)) for a, b in zip(ids, ids[1:])])


def flat_model(kind: str, rate: float, cpu: float, mem: float, tau_hat: int = 1) -> TaskPerfModel:
    """Model whose single-thread footprint is (cpu, mem) and whose best peak sits at ``tau_hat``."""
    pts = [ModelPoint(1, rate, cpu, mem)]
    if tau_hat > 1:
        pts.append(ModelPoint(tau_hat, rate * tau_hat, min(100.0, cpu * tau_hat), min(100.0, mem * tau_hat)))
    pts.append(ModelPoint(tau_hat + 1, rate, cpu, mem))
    return TaskPerfModel(kind, pts)
