import time

import numpy as np
import pytest

from branchsig.kernel import KernelSpec, gram
from branchsig.linear_solver import LinearODESpec
from branchsig.nonlinear_solver import NonlinearODESpec
from branchsig.path_core import InvalidInputError
from branchsig.signature import prefix_signature_rows, robust_stats
from branchsig.streaming import (
    DegenerateStepError,
    StreamConfig,
    advance,
    init_batch,
    online_update_linear,
    online_update_nonlinear,
    retrain,
    run_stream,
)

KS = KernelSpec("rbf", 1.0, 3, "robust")
OSC = LinearODESpec([10.0, 5.0, 1.0], [[0.0], [0.0]])


def _data(n=80, seed=0):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, n)
    f = np.cumsum(rng.standard_normal(n)) / np.sqrt(n)
    return t, np.column_stack([t, f]), f


def test_init_batch_window_too_small():
    t, x, f = _data()
    with pytest.raises(InvalidInputError):
        init_batch(t, x, f, OSC, KS, StreamConfig(n0=2))


def test_init_batch_fits_first_window():
    t, x, f = _data()
    st = init_batch(t, x, f, OSC, KS, StreamConfig(n0=20))
    assert st.n_seen == 21
    assert st.window_alpha().shape == (21, 1)


def test_online_rows_are_exact():
    t, x, f = _data()
    st = init_batch(t, x, f, OSC, KS, StreamConfig(n0=20, kappa=np.inf))
    for k in range(21, 60):
        rec = online_update_linear(st, t[k], x[k], f[k])
        assert rec.row_residual <= 1e-12 * max(1.0, abs(f[k]))
        assert st.window_alpha().shape[0] == k + 1


def test_duplicate_timestamp_rejected():
    t, x, f = _data()
    st = init_batch(t, x, f, OSC, KS, StreamConfig(n0=20))
    with pytest.raises(DegenerateStepError):
        online_update_linear(st, t[20], x[21], f[21])


def test_three_node_hand_update():
    # u' = f: Method I gives L = K, so the new coefficient is a scalar division
    spec = LinearODESpec([0.0, 1.0], [[0.0]])
    t, x, f = _data(n=4)
    st = init_batch(t, x, f, spec, KS, StreamConfig(n0=2, kappa=np.inf))
    a_old = st.window_alpha()[:, 0].copy()
    online_update_linear(st, t[3], x[3], f[3])
    rows = prefix_signature_rows(x, 3)
    stats = robust_stats(rows[:3])
    K = gram(stats.apply(rows), KS)
    expect = (f[3] - K[3, :3] @ a_old) / K[3, 3]
    assert st.window_alpha()[3, 0] == pytest.approx(expect, rel=1e-12)
    assert np.array_equal(st.window_alpha()[:3, 0], a_old)


def _zero_nl(spec):
    return NonlinearODESpec(spec, lambda U: 0.0 * U[0],
                            [lambda U: np.zeros(U[0].shape + (U[0].shape[1],)), None])


def test_newton_with_zero_nonlinearity_equals_linear():
    t, x, f = _data()
    cfg = StreamConfig(n0=20, kappa=np.inf)
    lin = init_batch(t, x, f, OSC, KS, cfg)
    nl = init_batch(t, x, f, _zero_nl(OSC), KS, cfg)
    nl.alpha.set(lin.window_alpha())  # same batch coefficients, compare updates only
    for k in range(21, 40):
        a = online_update_linear(lin, t[k], x[k], f[k])
        b = online_update_nonlinear(nl, t[k], x[k], f[k])
        assert np.max(np.abs(lin.window_alpha()[-1] - nl.window_alpha()[-1])) <= 1e-12
        assert abs(a.u[0] - b.u[0]) <= 1e-12


def test_tiny_gamma_close_to_linear():
    t, x, f = _data()
    cfg = StreamConfig(n0=20, kappa=np.inf)
    lin = init_batch(t, x, f, LinearODESpec([5.0, 10.0, 1.0], [[0.0], [1.0]]), KS, cfg)
    nl = init_batch(t, x, f, NonlinearODESpec.duffing(5, 10, 1e-8, 0.0, 1.0), KS, cfg)
    nl.alpha.set(lin.window_alpha())
    for k in range(21, 40):
        online_update_linear(lin, t[k], x[k], f[k])
        online_update_nonlinear(nl, t[k], x[k], f[k])
        assert abs(lin.window_alpha()[-1, 0] - nl.window_alpha()[-1, 0]) <= 1e-6


def test_duffing_stream_newton_iterations():
    from branchsig.config import make_config
    from branchsig.experiments import build_problem, kernel_spec

    cfg = make_config("duffing", overrides={"n": "300"})
    prob = build_problem(cfg)
    sc = StreamConfig(n0=cfg.window(), kappa=10)
    values = np.column_stack([prob.grid, prob.channels])
    res = run_stream(prob.grid, values, prob.forcing, prob.spec, kernel_spec(cfg), sc)
    online = res.newton_iters[np.array(res.kinds) == "online"]
    assert online.size > 0
    assert np.mean(online <= 3) >= 0.95


def test_retrain_right_after_init_is_a_no_op():
    t, x, f = _data()
    st = init_batch(t, x, f, OSC, KS, StreamConfig(n0=20))
    before = st.window_alpha()
    retrain(st)
    assert np.max(np.abs(st.window_alpha() - before)) <= 1e-10


def test_retrain_dominates_frozen_residual():
    t, x, f = _data(n=120)
    st = init_batch(t, x, f, OSC, KS, StreamConfig(n0=40, kappa=np.inf))
    for k in range(41, 51):
        online_update_linear(st, t[k], x[k], f[k])
    # refit over the same nodes the frozen run covered
    from dataclasses import replace

    st.config = replace(st.config, n0=50)
    frozen = st.window_residual()
    retrain(st)
    assert st.window_residual() <= frozen + 1e-12


def test_retrain_needs_full_window():
    t, x, f = _data()
    st = init_batch(t, x, f, OSC, KS, StreamConfig(n0=20))
    from dataclasses import replace

    st.config = replace(st.config, n0=40)
    with pytest.raises(InvalidInputError):
        retrain(st)


def test_kappa_one_always_retrains():
    t, x, f = _data(n=40)
    res = run_stream(t, x, f, OSC, KS, StreamConfig(n0=20, kappa=1))
    assert set(res.kinds[21:]) == {"retrain"}


def test_kappa_inf_never_retrains():
    t, x, f = _data(n=40)
    res = run_stream(t, x, f, OSC, KS, StreamConfig(n0=20, kappa=np.inf))
    assert "retrain" not in res.kinds
    assert res.kinds[:21] == ["init"] * 21


def test_kappa_ten_cadence():
    t, x, f = _data(n=60)
    res = run_stream(t, x, f, OSC, KS, StreamConfig(n0=20, kappa=10))
    idx = [k for k, kind in enumerate(res.kinds) if kind == "retrain"]
    assert idx == [30, 40, 50]


def test_bad_kappa():
    with pytest.raises(InvalidInputError):
        StreamConfig(n0=5, kappa=0)


def test_incremental_signatures_match_recomputation():
    t, x, f = _data(n=50)
    st = init_batch(t, x, f, OSC, KS, StreamConfig(n0=20, kappa=np.inf))
    for k in range(21, 50):
        advance(st, t[k], x[k], f[k])
    full = prefix_signature_rows(x, 3)
    assert np.max(np.abs(st.sig.view() - full)) <= 1e-12


def test_solow_stream_shape():
    from branchsig.config import make_config
    from branchsig.experiments import run_experiment

    rep = run_experiment(make_config("solow", overrides={"mode": "stream", "plot": "false"}))
    assert rep.info["n0"] == 50
    assert rep.metrics["model.test.solution"] < 1e-4


def test_step_cost_scaling():
    t, x, f = _data(n=460)
    times = []
    for n in (100, 200, 400):
        st = init_batch(t, x, f, OSC, KS, StreamConfig(n0=n, kappa=np.inf))
        best = np.inf
        for k in range(n + 1, n + 60):
            t0 = time.perf_counter()
            online_update_linear(st, t[k], x[k], f[k])
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    slope = np.polyfit(np.log([100, 200, 400]), np.log(times), 1)[0]
    assert slope <= 1.2
