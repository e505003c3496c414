import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchsig.bench import lift_grad_error, lift_grad_instance
from branchsig.kernel import KernelSpec, build_gram_stack
from branchsig.lift import (
    LiftProblem,
    LiftTrainConfig,
    MlpParams,
    build_system,
    grad_check,
    init_mlp,
    lifted_path,
    load_mlp,
    mlp_forward,
    model_loss,
    save_mlp,
    shuffle_grad,
    shuffle_loss,
    shuffle_loss_values,
    solve_alpha,
    total_grad,
    total_loss,
    train_lift,
)
from branchsig.linear_solver import LinearODESpec, assemble_method1, solve_lstsq
from branchsig.nonlinear_solver import NonlinearODESpec
from branchsig.path_core import InvalidInputError, Path

KS = KernelSpec("rbf", 1.0, 2, "robust")


def _problem(n=12, seed=0, nonlinear=False):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, n)
    f = np.cumsum(rng.standard_normal(n)) / np.sqrt(n)
    spec = (NonlinearODESpec.duffing(5.0, 10.0, 10.0, 0.0, 1.0) if nonlinear
            else LinearODESpec([10.0, 5.0, 1.0], [[0.0], [0.0]]))
    return LiftProblem(Path(t, np.column_stack([t, f])), f, spec, KS)


def test_zero_network_gives_zero_output():
    th = MlpParams((np.zeros((2, 3)), np.zeros((3, 2))), (np.zeros(3), np.zeros(2)))
    assert not np.any(mlp_forward(th, np.array([[0.3, -1.0], [2.0, 5.0]])))


def test_identity_layer():
    th = MlpParams((np.eye(3)[:, :2],), (np.zeros(2),))
    x = np.array([0.5, -2.0, 7.0])
    assert np.array_equal(mlp_forward(th, x), x[:2])


def test_lipschitz_bound():
    th = init_mlp((2, 8, 8, 3), seed=4, output_scale=1.0)
    bound = np.prod([np.linalg.norm(W, 2) for W in th.weights])
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.standard_normal(2), rng.standard_normal(2)
        out = mlp_forward(th, x) - mlp_forward(th, y)
        assert np.all(np.isfinite(out))
        assert np.linalg.norm(out) <= bound * np.linalg.norm(x - y) + 1e-12


def test_shape_errors():
    th = init_mlp((2, 4, 1))
    with pytest.raises(InvalidInputError):
        mlp_forward(th, np.zeros(3))
    with pytest.raises(InvalidInputError):
        MlpParams((np.zeros((2, 3)), np.zeros((4, 1))), (np.zeros(3), np.zeros(1)))
    with pytest.raises(InvalidInputError):
        th.with_flat(np.zeros(th.n_params + 1))


def test_flat_round_trip():
    th = init_mlp((2, 5, 3), seed=1)
    again = th.with_flat(th.flat())
    assert all(np.array_equal(a, b) for a, b in zip(th.weights, again.weights))


def test_checkpoint_round_trip(tmp_path):
    th = init_mlp((2, 7, 4, 3), seed=9, output_scale=1.0)
    p = tmp_path / "net.txt"
    save_mlp(th, p)
    back = load_mlp(p)
    assert back.sizes == th.sizes
    assert np.array_equal(back.flat(), th.flat())
    assert p.read_text().splitlines()[0] == "branchsig-mlp 1 3"


def test_checkpoint_bad_header(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("something else\n")
    with pytest.raises(InvalidInputError):
        load_mlp(p)


def test_shuffle_loss_constant_is_zero():
    assert shuffle_loss_values(np.full((10, 3), 2.5)) == 0.0


def test_shuffle_loss_hand_oracle():
    t = np.arange(4.0)
    assert shuffle_loss_values(np.column_stack([t, t**2])) == pytest.approx(384.0, rel=1e-14)


def test_shuffle_loss_linear_channels_refine():
    vals = []
    for n in (20, 40, 80, 160):
        t = np.linspace(0, 1, n + 1)
        vals.append(shuffle_loss_values(np.column_stack([2 * t, -t])))
    ratios = np.array(vals[:-1]) / np.array(vals[1:])
    assert np.all((ratios > 3.5) & (ratios < 4.5))


def test_shuffle_loss_needs_two_points():
    with pytest.raises(InvalidInputError):
        shuffle_loss_values(np.zeros((1, 2)))


def test_shuffle_grad_fd():
    prob = _problem()
    th = init_mlp((2, 6, 3), seed=2, output_scale=1.0)
    err = grad_check(th, lambda x: shuffle_loss(x, prob.base), lambda x: shuffle_grad(x, prob.base)[1])
    assert err < 1e-5


def test_model_loss_at_lstsq_solution():
    prob = _problem()
    th = init_mlp((2, 6, 2), seed=3)
    sys_ = build_system(th, prob)
    res = solve_lstsq(sys_.L, sys_.Ft)
    assert model_loss(th, res.alpha, prob) == pytest.approx(res.residual_norm**2 / 12, rel=1e-10, abs=1e-30)


def test_no_lift_reduces_to_solver_loss():
    prob = _problem()
    stack = build_gram_stack(prob.base, KS, 2)
    L, Ft, _ = assemble_method1(prob.spec, stack, prob.forcing)
    a = np.random.default_rng(0).standard_normal(12)
    assert model_loss(None, a, prob) == pytest.approx(float(np.sum((L @ a - Ft) ** 2)) / 12, rel=1e-14)


def test_model_loss_sensitive_to_theta():
    prob = _problem()
    th = init_mlp((2, 6, 2), seed=3, output_scale=1.0)
    a = np.random.default_rng(1).standard_normal(12)
    flat = th.flat()
    flat[0] += 0.1
    assert model_loss(th, a, prob) != model_loss(th.with_flat(flat), a, prob)


def test_lifted_path_keeps_original_channels():
    prob = _problem()
    th = init_mlp((2, 6, 3), seed=5, output_scale=1.0)
    lp = lifted_path(th, prob.base)
    assert lp.dim == 5
    assert np.array_equal(lp.values[:, :2], prob.base.values)
    assert np.array_equal(lp.grid, prob.base.grid)


@pytest.mark.parametrize("grad", ["fd", "tape"])
def test_tape_and_fd_model_gradients(grad):
    for seed in range(4):
        assert lift_grad_error(seed, grad) < 1e-4


def test_tape_on_three_node_toy():
    t = np.linspace(0, 1, 3)
    f = np.array([0.2, -0.4, 0.9])
    prob = LiftProblem(Path(t, np.column_stack([t, f])), f,
                       LinearODESpec([0.0, 1.0], [[0.0]]), KernelSpec("rbf", 1.0, 2, "none"))
    th = init_mlp((2, 4, 2), seed=0, output_scale=1.0)
    a = np.array([0.3, -0.2, 0.5])
    cfg = LiftTrainConfig(grad="tape", lam_shuffle=0.0)
    err = grad_check(th, lambda x: total_loss(x, a, prob, cfg), lambda x: total_grad(x, a, prob, cfg))
    assert err < 1e-4


def test_zero_loss_point_has_zero_gradients():
    prob = _problem()
    th = MlpParams((np.zeros((2, 4)), np.zeros((4, 2))), (np.zeros(4), np.zeros(2)))
    a = np.zeros(12)
    zero = LiftProblem(prob.base, np.zeros(12), prob.spec, KS)
    for grad in ("fd", "tape"):
        g = total_grad(th, a, zero, LiftTrainConfig(grad=grad))
        assert np.max(np.abs(g)) <= 1e-8


def test_train_shuffle_only_decreases():
    prob = _problem(n=20)
    cfg = LiftTrainConfig(lam_model=0.0, lam_shuffle=1.0, outer_iters=50, hidden=(8,), ext_dim=2,
                          step_size=5e-2)
    th0 = init_mlp((2, 8, 2), seed=0, output_scale=1.0)
    res = train_lift(cfg, prob, th0)
    assert res.history[-1] < res.history[0]
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


def test_train_model_only_not_worse_than_no_lift():
    prob = _problem(n=15)
    base_sys = build_system(None, prob)
    base_alpha = solve_alpha(prob, base_sys)
    baseline = model_loss(None, base_alpha, prob, base_sys)
    cfg = LiftTrainConfig(lam_shuffle=0.0, outer_iters=5, hidden=(6,), ext_dim=2, grad="tape")
    th0 = MlpParams((np.zeros((2, 6)), np.zeros((6, 2))), (np.zeros(6), np.zeros(2)))
    res = train_lift(cfg, prob, th0)
    assert res.model_history[-1] <= baseline * (1 + 1e-9) + 1e-20


def test_train_history_non_increasing_nonlinear():
    prob = _problem(n=10, nonlinear=True)
    cfg = LiftTrainConfig(outer_iters=4, hidden=(6,), ext_dim=2, grad="tape")
    res = train_lift(cfg, prob)
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))
    assert not res.degraded


def test_warm_start_not_worse_than_cold():
    prob = _problem(n=12, nonlinear=True)
    th = init_mlp((2, 6, 2), seed=1, output_scale=1.0)
    sys_ = build_system(th, prob)
    prev = solve_alpha(prob, sys_)
    flat = th.flat()
    for k in range(3):
        flat = flat - 1e-3 * np.sign(np.sin(np.arange(flat.size) + k))
        cand = th.with_flat(flat)
        csys = build_system(cand, prob)
        warm = model_loss(cand, solve_alpha(prob, csys, prev), prob, csys)
        cold = model_loss(cand, solve_alpha(prob, csys, np.zeros(12)), prob, csys)
        assert warm <= cold * (1 + 1e-6) + 1e-18
        prev = solve_alpha(prob, csys, prev)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        LiftTrainConfig(lam_shuffle=0.0, lam_model=0.0)
    with pytest.raises(InvalidInputError):
        LiftTrainConfig(grad="magic")


@given(st.integers(0, 10_000), st.integers(2, 20), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_shuffle_loss_nonnegative_property(seed, n, p):
    E = np.random.default_rng(seed).standard_normal((n, p))
    assert shuffle_loss_values(E) >= 0.0
    assert shuffle_loss_values(np.ones((n, p)) * E[0]) == 0.0


@given(st.integers(0, 200))
@settings(max_examples=5, deadline=None)
def test_lift_grad_instances_property(seed):
    prob, th, a = lift_grad_instance(seed)
    assert np.isfinite(total_loss(th, a, prob, LiftTrainConfig()))
