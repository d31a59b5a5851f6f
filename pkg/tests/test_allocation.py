import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamsched.allocation import (AllocationPlan, TaskAllocation, allocate, allocate_lsa, allocate_mba,
                                    lsa_task, mba_task, slot_count)
from streamsched.dag import BUILTIN_KINDS, builtin_dag, get_rate
from streamsched.perfmodel import FIXTURE_IDS, ModelError

from conftest import chain


def test_lsa_blob_hand_example(models):
    threads, cpu, mem = lsa_task(models["azure-blob"], 100)
    assert threads == 50
    assert cpu == pytest.approx(337)
    assert mem == pytest.approx(1196)


def test_mba_blob_hand_example(models):
    threads, cpu, mem, bundles = mba_task(models["azure-blob"], 100)
    assert bundles == 3
    assert threads == 170
    assert cpu == pytest.approx(315, rel=0.05)
    assert mem == pytest.approx(326, rel=0.05)


def test_mba_blob_at_50_is_one_bundle_plus_residual(models):
    threads, cpu, mem, bundles = mba_task(models["azure-blob"], 50)
    # residual 20 t/s needs 35 threads on the fixture curve, using 28% memory
    assert (threads, bundles) == (85, 1)
    assert mem == pytest.approx(128)


@pytest.mark.parametrize("kind", FIXTURE_IDS)
def test_lsa_exact_peak_and_one_and_a_half(kind, models):
    m = models[kind]
    rate1 = m.peak_rate(1)
    c1, m1 = m.resources(1)
    assert lsa_task(m, rate1) == (1, pytest.approx(c1), pytest.approx(m1))
    threads, cpu, mem = lsa_task(m, 1.5 * rate1)
    assert threads == 2
    assert cpu == pytest.approx(1.5 * c1) and mem == pytest.approx(1.5 * m1)


@pytest.mark.parametrize("kind", FIXTURE_IDS)
def test_mba_single_bundle_at_peak(kind, models):
    m = models[kind]
    omega_hat, tau_hat = m.max_peak()
    assert mba_task(m, omega_hat) == (tau_hat, 100.0, 100.0, 1)


def test_mba_below_single_thread_rate_scales_down(models):
    m = models["parse-xml"]
    threads, cpu, mem, bundles = mba_task(m, 155)
    assert (threads, bundles) == (1, 0)
    assert cpu == pytest.approx(85 / 2) and mem == pytest.approx(35 / 2)


def test_zero_rate_keeps_one_thread(models):
    assert lsa_task(models["pi"], 0) == (1, 0.0, 0.0)
    assert mba_task(models["pi"], 0) == (1, 0.0, 0.0, 0)


def test_slot_count_examples():
    assert slot_count([TaskAllocation("a", 1, 242, 623)]) == 7
    assert slot_count([TaskAllocation("a", 1, 100, 100)]) == 1
    assert slot_count([TaskAllocation("a", 1, 323, 128), TaskAllocation("b", 1, 0, 40)]) == 4
    assert slot_count([]) == 0


def test_fixed_resources_count_towards_rho(models):
    plan = allocate_lsa(builtin_dag("linear"), 100, models)
    assert plan.tasks["source"] == TaskAllocation("source", 1, 10, 15)
    assert plan.tasks["sink"] == TaskAllocation("sink", 1, 10, 20)
    assert plan.rho == max(math.ceil(plan.total_cpu / 100 - 1e-9), math.ceil(plan.total_mem / 100 - 1e-9))


@pytest.mark.parametrize("dag", BUILTIN_KINDS)
@pytest.mark.parametrize("omega", [50, 100, 200])
def test_mba_never_needs_more_slots_than_lsa(dag, omega, models):
    g = builtin_dag(dag)
    assert allocate_mba(g, omega, models).rho <= allocate_lsa(g, omega, models).rho


@pytest.mark.parametrize("dag", BUILTIN_KINDS)
def test_invariants_over_matrix(dag, models):
    g = builtin_dag(dag)
    for omega in (10, 50, 100, 200, 333):
        rates = get_rate(g, omega)
        lsa = allocate_lsa(g, omega, models)
        mba = allocate_mba(g, omega, models)
        for t in g.tasks:
            if t.fixed is not None:
                continue
            m = models[t.kind]
            assert lsa.tasks[t.id].threads == math.ceil(rates[t.id] / m.peak_rate(1) - 1e-9)
            omega_hat, tau_hat = m.max_peak()
            a = mba.tasks[t.id]
            assert a.bundles == math.floor(rates[t.id] / omega_hat + 1e-9)
            assert a.threads <= math.ceil(rates[t.id] / omega_hat) * tau_hat
            # the groups MBA sizes can carry the task's rate
            residual = a.threads - a.bundles * tau_hat
            cover = a.bundles * omega_hat + (m.peak_rate(residual) if residual else 0)
            assert cover >= rates[t.id] - 1e-9


@settings(max_examples=40, deadline=None)
@given(dag=st.sampled_from(BUILTIN_KINDS), algorithm=st.sampled_from(["LSA", "MBA"]),
       omega=st.floats(1, 400), bump=st.floats(0, 100))
def test_allocation_monotone_in_omega(dag, algorithm, omega, bump, models):
    g = builtin_dag(dag)
    lo = allocate(algorithm, g, omega, models)
    hi = allocate(algorithm, g, omega + bump, models)
    assert hi.rho >= lo.rho
    for tid, a in lo.tasks.items():
        b = hi.tasks[tid]
        assert b.threads >= a.threads
        assert b.cpu >= a.cpu - 1e-9 and b.mem >= a.mem - 1e-9


def test_missing_model_is_an_error(models):
    with pytest.raises(ModelError):
        allocate_lsa(chain("a", "b", kinds={"a": "pi", "b": "unknown"}), 10, models)
    with pytest.raises(ValueError):
        allocate("XYZ", chain("a"), 1, models)


def test_plan_round_trip(tmp_path, models):
    plan = allocate_mba(builtin_dag("star"), 100, models)
    plan.save(tmp_path / "a.json")
    back = AllocationPlan.load(tmp_path / "a.json")
    assert back == plan
    assert {"algorithm", "omega", "rho", "tasks"} <= set(plan.to_dict())
