import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from streamsched.perfmodel import (FIXTURE_IDS, ModelError, ModelPoint, TaskPerfModel, TrialResult,
                                   bell_cap, build_model, detect_stability, flat_cap, linear_cap,
                                   load_fixture, load_models, ls_slope, model_from_capacity,
                                   synthetic_runner)


# ---------------------------------------------------------------- queries on fixtures

def test_parse_xml_single_thread(models):
    m = models["parse-xml"]
    assert m.peak_rate(1) == 310
    assert m.resources(1) == (85, 35)
    assert m.max_peak() == (310, 1)


def test_pi_peak(models):
    assert models["pi"].max_peak() == (110, 2)
    assert models["pi"].peak_rate(1) == 105


def test_blob_knots(models):
    m = models["azure-blob"]
    assert m.resources(1) == (6.74, 23.92)
    assert m.max_peak() == (30, 50)
    assert m.threads_for_rate(10) == 20


def test_table_interpolation(models):
    m = models["azure-table"]
    # straight line between (2, 5) and (9, 10); the text rounds this to about 6
    assert m.peak_rate(3) == pytest.approx(5 + 5 / 7)
    assert m.peak_rate(9) == 10


def test_table_threads_for_rate(models):
    m = models["azure-table"]
    assert m.threads_for_rate(3) == 1
    assert m.threads_for_rate(60) == 60
    assert m.threads_for_rate(61) is None


def test_clamp_beyond_last_knot(models):
    m = models["parse-xml"]
    assert m.peak_rate(500) == m.points[-1].peak_rate
    assert m.resources(500) == (m.points[-1].cpu, m.points[-1].mem)


@pytest.mark.parametrize("kind", FIXTURE_IDS)
def test_threads_for_rate_coherent_with_knots(kind, models):
    m = models[kind]
    for p in m.points:
        assert m.threads_for_rate(p.peak_rate) <= p.threads
        assert m.peak_rate(p.threads) == p.peak_rate


@pytest.mark.parametrize("kind", FIXTURE_IDS)
def test_fixture_provenance_marked(kind):
    assert load_fixture(kind).provenance


def test_model_validation():
    with pytest.raises(ModelError):
        TaskPerfModel("x", [ModelPoint(2, 1, 1, 1), ModelPoint(2, 2, 2, 2)])
    with pytest.raises(ModelError):
        TaskPerfModel.from_dict({"kind": "x", "points": []})
    with pytest.raises(ValueError):
        load_fixture("parse-xml").peak_rate(0)
    with pytest.raises(ModelError):
        load_fixture("nope")


def test_model_round_trip_and_override(tmp_path):
    m = TaskPerfModel("pi", [ModelPoint(1, 5, 1, 1)], {"source": "test"})
    m.save(tmp_path / "pi.json")
    assert TaskPerfModel.load(tmp_path / "pi.json") == m
    merged = load_models(tmp_path)
    assert merged["pi"].peak_rate(1) == 5
    assert merged["azure-blob"].peak_rate(1) == 2
    json.loads((tmp_path / "pi.json").read_text())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(1, 500), min_size=2, max_size=8), st.floats(1, 20))
def test_interpolation_is_piecewise_linear(rates, q):
    m = TaskPerfModel("x", [ModelPoint(i + 1, r, 1, 1) for i, r in enumerate(rates)])
    lo = int(np.floor(q))
    hi = min(lo + 1, len(rates))
    lo = min(lo, len(rates))
    if lo == hi:
        assert m.peak_rate(q) == pytest.approx(rates[lo - 1])
    else:
        want = rates[lo - 1] + (q - lo) * (rates[hi - 1] - rates[lo - 1])
        assert m.peak_rate(q) == pytest.approx(want)


# ---------------------------------------------------------------- stability

def test_constant_latency_is_stable():
    v = detect_stability([(t, 50.0) for t in range(100)])
    assert v.slope == 0 and v.stable


def test_growing_latency_is_unstable():
    v = detect_stability([(k, 10 + 0.5 * k) for k in range(100)])
    assert v.slope == pytest.approx(0.5) and not v.stable


def test_noisy_flat_series_is_stable():
    rng = np.random.default_rng(3)
    series = [(k, 40 + rng.uniform(-1, 1)) for k in range(1000)]
    v = detect_stability(series)
    assert v.stable
    assert v.slope == pytest.approx(stats.linregress(*zip(*series)).slope, abs=1e-12)


def test_warmup_and_short_series():
    series = [(0, 100.0), (1, 0.0), (2, 0.0), (3, 0.0)]
    assert detect_stability(series, warmup=1).slope == 0
    with pytest.raises(ValueError):
        detect_stability([(0, 1.0), (5, 1.0)], warmup=3)


def test_slope_matches_regression_oracle_on_random_series():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        x = np.sort(rng.uniform(0, 100, n))
        if np.ptp(x) == 0:
            continue
        y = rng.normal(0, 1, n) + rng.uniform(-0.01, 0.01) * x
        oracle = stats.linregress(x, y).slope
        verdict = detect_stability(list(zip(x, y)))
        assert verdict.slope == pytest.approx(oracle, rel=1e-7, abs=1e-10)
        assert verdict.stable == (oracle <= 0.001)
    assert ls_slope([1, 1], [3, 4]) == 0.0


# ---------------------------------------------------------------- builder

def _within_one_step(model, cap, delta_omega):
    for p in model.points:
        truth = cap(p.threads)
        assert p.peak_rate <= truth
        step = delta_omega if delta_omega is not None else max(1.0, 0.05 * p.peak_rate)
        assert truth - p.peak_rate < step + 1e-9


@pytest.mark.parametrize("delta_omega", [50.0, None, 1.0])
def test_builder_linear_cap_runs_to_tau_max(delta_omega):
    cap = linear_cap(100)
    m = build_model(synthetic_runner(cap), "lin", delta_omega=delta_omega, tau_max=20)
    assert m.provenance["stop_reason"] == "tau_max"
    assert [p.threads for p in m.points] == [1, 2, 3, 5, 7, 10, 15]
    _within_one_step(m, cap, delta_omega)


def test_builder_linear_cap_exact_knots_with_step_50():
    m = build_model(synthetic_runner(linear_cap(100)), delta_omega=50, delta_tau=1, tau_max=4)
    # sweep visits 1, 51, 101, ...: the largest swept rate not above 100 tau
    assert [p.peak_rate for p in m.points] == [51, 151, 251]


@pytest.mark.parametrize("delta_omega", [50.0, None, 1.0])
def test_builder_flat_cap_stops_by_slope(delta_omega):
    cap = flat_cap(300)
    m = build_model(synthetic_runner(cap), "flat", delta_omega=delta_omega)
    assert m.provenance["stop_reason"] == "rate_slope"
    assert len(m.points) == 3
    _within_one_step(m, cap, delta_omega)
    assert m.max_peak()[1] == 1


def test_builder_flat_cap_unit_step_recovers_peak():
    m = build_model(synthetic_runner(flat_cap(300)), delta_omega=1.0)
    assert m.max_peak() == (300, 1)


def test_builder_bell_cap_stops_after_peak():
    cap = bell_cap(30, 50, 2)
    m = build_model(synthetic_runner(cap), "bell", delta_omega=1.0)
    assert m.provenance["stop_reason"] == "rate_slope"
    omega_hat, tau_hat = m.max_peak()
    assert (omega_hat, tau_hat) == (30, 50)
    assert m.points[-1].threads > 50  # only stops once the curve has turned down
    tail = m.points[-3:]
    assert ls_slope([p.threads for p in tail], [p.peak_rate for p in tail]) <= 0.001
    _within_one_step(m, cap, 1.0)


def test_builder_rejects_oversubscribed_points():
    # 30 threads at 5% CPU each saturate the slot: no point past that may exceed 100%
    m = build_model(synthetic_runner(linear_cap(10), cpu_per_thread=5), delta_omega=1, tau_max=40)
    assert all(p.cpu <= 100 for p in m.points)


def test_builder_unmodelable_task():
    with pytest.raises(ModelError):
        build_model(lambda tau, omega: TrialResult(1, 1, False))


def test_builder_stops_when_higher_thread_count_is_unstable():
    def runner(tau, omega):
        return TrialResult(1, 1, tau == 1 and omega <= 10)

    m = build_model(runner, delta_omega=1)
    assert m.provenance["stop_reason"] == "unstable"
    assert [(p.threads, p.peak_rate) for p in m.points] == [(1, 10)]


def test_model_from_capacity_is_exact():
    m = model_from_capacity("x", linear_cap(7), 5)
    assert [p.peak_rate for p in m.points] == [7, 14, 21, 28, 35]
