import dataclasses

import numpy as np
import pytest
import scipy.io
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from batchmf.ctmc import (
    ExactOptimum,
    build,
    build_two_type_nonpreemptive,
    build_two_type_preemptive,
    check_irreducible,
    export_matrix_market,
    initial_state,
    optimize_batch_exact,
    single_state_count,
    solve_stationary,
    state_cap,
    throughput_upper_bound,
    write_throughput_table,
)
from batchmf.errors import ConfigError, StateSpaceTooLarge
from batchmf.model import SingleTypeConfig, SpeedupModel, TwoTypeConfig

UNIT = SpeedupModel.constant(1.0)


def nullspace_pi(model):
    """Independent oracle: normalised null vector of ``Q^T``."""
    ns = scipy.linalg.null_space(model.generator.toarray().T)
    assert ns.shape[1] == 1
    v = ns[:, 0]
    return v / v.sum()


def test_tiny_chain_states():
    cfg = SingleTypeConfig(2, 1, 1.0, 1, UNIT, UNIT)
    model = build(cfg)
    assert model.size == 6
    assert set(model.states) == {
        (2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1), (0, 0, 2),
    }
    np.testing.assert_allclose(model.generator.sum(axis=1), 0.0, atol=1e-12)


def test_single_client_closed_form():
    lam, M, mu = 3.0, 5.0, 7.0
    cfg = SingleTypeConfig(1, 1, lam, 1, SpeedupModel.constant(mu), SpeedupModel.constant(M))
    res = solve_stationary(build(cfg))
    assert res.throughput == pytest.approx(1.0 / (1 / lam + 1 / M + 1 / mu), rel=1e-12)


def test_single_rates_in_generator():
    cfg = SingleTypeConfig(6, 2, 2.0, 2, SpeedupModel.constant(3.0), SpeedupModel.constant(5.0))
    model = build(cfg)
    Q = model.generator
    i = model.index[(2, 2, 2)]
    # arrival 2*2, one batch of 2 from y=2 at M, one batch in service at mu
    assert Q[i, model.index[(1, 3, 2)]] == pytest.approx(4.0)
    assert Q[i, model.index[(2, 0, 4)]] == pytest.approx(5.0)
    assert Q[i, model.index[(4, 2, 0)]] == pytest.approx(3.0)
    j = model.index[(0, 0, 6)]
    # three batches but only m=2 servers
    assert Q[j, model.index[(2, 0, 4)]] == pytest.approx(6.0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 25), data=st.data())
def test_single_state_count_formula(n, data):
    k = data.draw(st.integers(1, n))
    m = data.draw(st.integers(1, 4))
    instant = data.draw(st.booleans())
    cfg = SingleTypeConfig(n, m, 1.0, k, UNIT, None if instant else UNIT)
    model = build(cfg)
    assert model.size == single_state_count(cfg)
    assert check_irreducible(model)
    # job conservation in every state
    assert all(sum(s) == n for s in model.states)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(2, 7), m=st.integers(1, 3), data=st.data(),
    discipline=st.sampled_from(["preemptive", "nonpreemptive"]),
    instant=st.booleans(),
)
def test_two_type_irreducible_and_conservative(n, m, data, discipline, instant):
    k1 = data.draw(st.integers(1, n))
    k2 = data.draw(st.integers(1, n + 1 - k1))
    p = data.draw(st.sampled_from([0.2, 0.5, 0.8]))
    batching = None if instant else SpeedupModel.constant(4.0)
    cfg = TwoTypeConfig(n, m, 1.5, p, k1, k2, SpeedupModel.constant(2.0), SpeedupModel.constant(1.0),
                        batching, batching, discipline)
    model = build(cfg)
    assert check_irreducible(model)
    for s in model.states:
        assert all(v >= 0 for v in s)
        assert sum(s) <= n
        if discipline == "preemptive":
            x, y1, y2, zk1 = s
            z2 = (n - x - y1 - y2 - zk1)
            assert zk1 % k1 == 0 and z2 % k2 == 0
        else:
            x, y1, y2, uk, vk = s
            assert uk % k1 == 0 and vk % k1 == 0
            assert vk // k1 <= m
            if uk > 0:
                # type-1 batches only wait when every server is busy
                z2 = (n - x - y1 - y2 - uk - vk) // k2
                assert vk // k1 + min(m - vk // k1, z2) == m
    res = solve_stationary(model)
    np.testing.assert_allclose(res.pi, nullspace_pi(model), atol=1e-10)


def test_irreducibility_detects_cut_edges():
    model = build(SingleTypeConfig(4, 1, 1.0, 2, UNIT, UNIT))
    assert check_irreducible(model)
    Q = model.generator.tolil()
    for i, (x, y, zk) in enumerate(model.states):
        if zk:
            # drop service completions (server back to producer)
            Q[i, model.index[(x + 2, y, zk - 2)]] = 0.0
    cut = dataclasses.replace(model, generator=Q.tocsr())
    assert not check_irreducible(cut)


def test_two_type_deadlock_rejected():
    # two clients parked one in each size-2 batcher would wait forever
    with pytest.raises(ConfigError) as info:
        TwoTypeConfig(2, 1, 1.0, 0.5, 2, 2, UNIT, UNIT)
    assert info.value.path == "n"
    TwoTypeConfig(2, 1, 1.0, 1.0, 2, 2, UNIT, UNIT)
    cfg = TwoTypeConfig(5, 1, 1.0, 0.5, 1, 1, UNIT, UNIT)
    assert optimize_batch_exact(cfg).table[-1].k == 3


def test_preemptive_type1_preempts_type2():
    g = SpeedupModel.constant(1.0)
    cfg = TwoTypeConfig(4, 1, 1.0, 0.5, 2, 2, g, g, None, None, "preemptive")
    model = build(cfg)
    Q = model.generator
    # one type-1 batch and one type-2 batch: only type 1 is served
    s = (0, 0, 0, 2)
    i = model.index[s]
    row = Q.getrow(i)
    targets = {model.states[j]: v for j, v in zip(row.indices, row.data) if j != i}
    assert targets == {(2, 0, 0, 0): 1.0}


def test_nonpreemptive_type2_keeps_server():
    g = SpeedupModel.constant(1.0)
    cfg = TwoTypeConfig(4, 1, 1.0, 0.5, 2, 2, g, g, None, None, "nonpreemptive")
    model = build(cfg)
    # a type-2 batch in service and a queued type-1 batch
    s = (0, 0, 0, 2, 0)
    assert s in model.index
    i = model.index[s]
    row = model.generator.getrow(i)
    targets = {model.states[j]: v for j, v in zip(row.indices, row.data) if j != i}
    # the type-2 batch completes and the queued type-1 batch takes the server
    assert targets == {(2, 0, 0, 0, 2): 1.0}


def test_disciplines_agree_without_contention():
    g1, g2 = SpeedupModel.constant(3.0), SpeedupModel.constant(1.0)
    base = TwoTypeConfig(6, 3, 2.0, 0.4, 2, 2, g1, g2, None, None, "preemptive")
    a = solve_stationary(build_two_type_preemptive(base))
    b = solve_stationary(build_two_type_nonpreemptive(dataclasses.replace(base, discipline="nonpreemptive")))
    # at most three batches exist, so nobody ever waits for a server
    assert a.throughput == pytest.approx(b.throughput, rel=1e-12)


def test_discipline_guard():
    cfg = TwoTypeConfig(4, 1, 1.0, 0.5, 2, 2, UNIT, UNIT)
    with pytest.raises(ConfigError):
        build_two_type_nonpreemptive(cfg)


def test_initial_states():
    assert initial_state(SingleTypeConfig(5, 1, 1.0, 1, UNIT)) == (5, 0, 0)
    cfg = TwoTypeConfig(5, 1, 1.0, 0.5, 1, 1, UNIT, UNIT)
    assert initial_state(cfg) == (5, 0, 0, 0)
    assert initial_state(dataclasses.replace(cfg, discipline="nonpreemptive")) == (5, 0, 0, 0, 0)


@pytest.mark.parametrize("method", ["dense", "sparse", "iterative"])
def test_solvers_agree(reference_single, method):
    model = build(reference_single(40, 2, 4))
    ref = nullspace_pi(model)
    res = solve_stationary(model, method=method)
    np.testing.assert_allclose(res.pi, ref, atol=1e-12)
    assert res.residual < 1e-8


def test_iterative_on_two_type(reference_two_type):
    model = build(reference_two_type(30, 2, 4))
    a = solve_stationary(model, method="iterative")
    b = solve_stationary(model, method="sparse")
    assert a.throughput == pytest.approx(b.throughput, rel=1e-10)
    assert a.per_type[0] + a.per_type[1] == pytest.approx(a.throughput)


def test_unknown_method(reference_single):
    with pytest.raises(ValueError):
        solve_stationary(build(reference_single(3, 1, 1)), method="magic")


def test_state_cap(monkeypatch, reference_single):
    monkeypatch.setenv("BATCHMF_STATE_CAP", "50")
    assert state_cap() == 50
    with pytest.raises(StateSpaceTooLarge, match="BATCHMF_STATE_CAP"):
        build(reference_single(100, 2, 1))
    with pytest.raises(StateSpaceTooLarge):
        build(TwoTypeConfig(30, 1, 1.0, 0.5, 1, 1, UNIT, UNIT, UNIT, UNIT))
    monkeypatch.setenv("BATCHMF_STATE_CAP", "lots")
    with pytest.raises(ConfigError):
        state_cap()


def test_upper_bound_holds(reference_single):
    for k in (1, 3, 10, 30):
        cfg = reference_single(30, 2, k)
        assert solve_stationary(build(cfg)).throughput <= throughput_upper_bound(cfg) * (1 + 1e-12)


def test_optimize_full_pruned_and_parallel(reference_single):
    cfg = reference_single(60, 2, 1)
    full = optimize_batch_exact(cfg, 20)
    pruned = optimize_batch_exact(cfg, 20, prune=True)
    par = optimize_batch_exact(cfg, 20, jobs=2)
    assert isinstance(full, ExactOptimum)
    assert [r.k for r in full.table] == list(range(1, 21))
    assert full.k_star == pruned.k_star == par.k_star
    assert full.theta_star == pytest.approx(pruned.theta_star, rel=1e-12)
    assert [r.theta for r in par.table] == pytest.approx([r.theta for r in full.table], rel=1e-12)
    assert full.theta_star == max(r.theta for r in full.table)


def test_optimize_k1(reference_single):
    assert optimize_batch_exact(reference_single(10, 1, 1), 1).k_star == 1


def test_optimize_kmax_range(reference_single):
    with pytest.raises(ConfigError):
        optimize_batch_exact(reference_single(10, 1, 1), 11)


def test_exports(tmp_path, reference_single):
    cfg = reference_single(10, 1, 2)
    model = build(cfg)
    export_matrix_market(model, tmp_path / "q.mtx")
    Q = scipy.io.mmread(tmp_path / "q.mtx")
    assert Q.shape == (model.size, model.size)
    opt = optimize_batch_exact(cfg, 3)
    write_throughput_table(opt.table, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "k,theta,states,residual"
    assert len(lines) == 4
