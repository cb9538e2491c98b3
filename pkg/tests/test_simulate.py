import numpy as np
import pytest

from batchmf.ctmc import build, solve_stationary
from batchmf.errors import ConfigError, StateSpaceTooLarge
from batchmf.meanfield import drift_single, fixed_point_single, integrate
from batchmf.model import SingleTypeConfig, SpeedupModel, TwoTypeConfig
from batchmf.simulate import mixing_curve, scale_config, scaled_path, simulate, sup_distance

UNIT = SpeedupModel.constant(1.0)


def test_single_client_renewal():
    cfg = SingleTypeConfig(1, 1, 1.0, 1, UNIT, UNIT)
    res = simulate(cfg, events=200_000, seed=1)
    assert res.throughput == pytest.approx(1 / 3, rel=0.02)
    assert res.ci[0] < res.throughput < res.ci[1]


def test_deterministic_replay():
    cfg = SingleTypeConfig(6, 2, 1.0, 2, UNIT, UNIT)
    a = simulate(cfg, events=5000, seed=7, trace=True)
    b = simulate(cfg, events=5000, seed=7, trace=True)
    assert a.trace == b.trace
    assert a.throughput == b.throughput
    c = simulate(cfg, events=5000, seed=8, trace=True)
    assert a.trace != c.trace


def test_throughput_definition_and_occupancy():
    cfg = SingleTypeConfig(5, 2, 2.0, 2, SpeedupModel.constant(1.5), SpeedupModel.constant(3.0))
    res = simulate(cfg, horizon=500.0, seed=3, occupancy=True)
    span = res.horizon - res.warmup
    assert res.throughput == pytest.approx(sum(res.completed) / span)
    assert sum(res.occupancy.values()) == pytest.approx(1.0, abs=1e-9)
    for s in res.occupancy:
        assert sum(s) == cfg.n


def test_occupancy_close_to_stationary():
    cfg = SingleTypeConfig(4, 1, 1.0, 2, SpeedupModel.constant(1.0), SpeedupModel.constant(2.0))
    model = build(cfg)
    pi = solve_stationary(model).pi
    res = simulate(cfg, events=300_000, seed=11, occupancy=True)
    est = np.array([res.occupancy.get(s, 0.0) for s in model.states])
    assert 0.5 * np.abs(est - pi).sum() < 0.02


def test_matches_exact_reference(reference_single):
    cfg = reference_single(50, 4, 5)
    exact = solve_stationary(build(cfg)).throughput
    res = simulate(cfg, events=400_000, seed=5)
    assert res.throughput == pytest.approx(exact, rel=0.02)


def test_ci_coverage_small_instance():
    cfg = SingleTypeConfig(3, 1, 1.0, 1, SpeedupModel.constant(2.0), SpeedupModel.constant(4.0))
    exact = solve_stationary(build(cfg)).throughput
    hits = 0
    for seed in range(50):
        lo, hi = simulate(cfg, events=20_000, seed=seed).ci
        hits += lo <= exact <= hi
    assert hits >= 45


@pytest.mark.parametrize("discipline", ["preemptive", "nonpreemptive"])
def test_two_type_simulation(discipline):
    cfg = TwoTypeConfig(6, 1, 1.5, 0.4, 2, 2, SpeedupModel.constant(3.0), SpeedupModel.constant(1.0),
                        SpeedupModel.constant(5.0), SpeedupModel.constant(5.0), discipline)
    exact = solve_stationary(build(cfg))
    res = simulate(cfg, events=300_000, seed=2)
    assert len(res.per_type_throughput) == 2
    np.testing.assert_allclose(res.per_type_throughput, exact.per_type, rtol=0.03)


def test_budget_validation():
    cfg = SingleTypeConfig(2, 1, 1.0, 1, UNIT)
    with pytest.raises(ValueError):
        simulate(cfg)
    with pytest.raises(ValueError):
        simulate(cfg, horizon=1.0, events=10)
    with pytest.raises(ValueError):
        simulate(cfg, events=0)


def test_mixing_non_increasing_and_zero_at_stationarity():
    cfg = SingleTypeConfig(8, 2, 1.0, 2, SpeedupModel.constant(1.0), SpeedupModel.constant(3.0))
    model = build(cfg)
    times = np.linspace(0, 10, 41)
    curve = mixing_curve(model, times)
    assert curve.tv[0] == pytest.approx(1 - solve_stationary(model).pi[0])
    assert np.all(np.diff(curve.tv) <= 1e-9)
    assert np.all((curve.tv >= 0) & (curve.tv <= 1))
    pi = solve_stationary(model).pi
    from_pi = mixing_curve(model, times, pi0=pi)
    assert from_pi.tv[-1] < 1e-6


def test_mixing_matches_empirical_histogram():
    cfg = SingleTypeConfig(3, 1, 1.0, 1, SpeedupModel.constant(1.0), SpeedupModel.constant(2.0))
    model = build(cfg)
    t = 0.7
    curve = mixing_curve(model, [t])
    pi = solve_stationary(model).pi
    counts = np.zeros(model.size)
    runs = 4000
    for seed in range(runs):
        res = simulate(cfg, horizon=t, seed=seed, warmup=0.0, trace=True, batches=0)
        counts[model.index[res.trace[-1][2]]] += 1
    est = 0.5 * np.abs(counts / runs - pi).sum()
    assert est == pytest.approx(curve.tv[0], abs=0.04)


def test_mixing_cap():
    model = build(SingleTypeConfig(10, 1, 1.0, 1, UNIT))
    with pytest.raises(StateSpaceTooLarge):
        mixing_curve(model, [0.0, 1.0], cap=5)


def test_scaled_path_starts_active_and_tracks_ode():
    base = SingleTypeConfig(200, 20, 1.0, 2, SpeedupModel.constant(1.0))
    path = scaled_path(base, 5.0, seed=0)
    assert path.w[0] == 1.0
    ode = integrate(lambda w: drift_single(w, 1.0, base.service, 2, base.alpha), 1.0, 5.0, simplex_axes=())
    assert sup_distance(path, ode) < 0.15


def test_scaled_path_time_average_band():
    base = SingleTypeConfig(400, 40, 1.0, 2, SpeedupModel.constant(1.0))
    target = fixed_point_single(1.0, base.service, 2, base.alpha).w[0]
    means = []
    for seed in range(5):
        path = scaled_path(base, 40.0, seed=seed)
        keep = path.t[:-1] > 10.0
        dt = np.diff(path.t)[keep]
        means.append(np.sum(path.w[:-1][keep] * dt) / dt.sum())
    assert abs(np.mean(means) - target) < 3 / np.sqrt(base.n)


def test_scaled_path_requires_instantaneous():
    with pytest.raises(ConfigError):
        scaled_path(SingleTypeConfig(10, 1, 1.0, 1, UNIT, UNIT), 1.0)


def test_scale_config_keeps_alpha():
    cfg = scale_config(SingleTypeConfig(100, 8, 1.0, 2, UNIT), 400)
    assert (cfg.n, cfg.m) == (400, 32)
