import numpy as np
import pytest

from kfacbench.budget import Budget, LrSchedule
from kfacbench.data import gen_blobs, gen_linreg
from kfacbench.fisher import FisherState
from kfacbench.model import Gradients, Network, forward, init_network, loss_and_backward
from kfacbench.optim import (
    ConfigError,
    KfacConfig,
    OptState,
    SgdConfig,
    clip_scale,
    kfac_apply,
    kfac_step,
    optimizer_from_dict,
    sgd_step,
    train_run,
)
from oracles import factors


def scalar_net(theta):
    # a single weight with the bias column pinned at zero by zero gradients
    return Network([np.array([[theta, 0.0]])], ["identity"], "mse")


def test_sgd_single_step():
    net = scalar_net(1.0)
    sgd_step(net, OptState(), Gradients([np.array([[0.5, 0.0]])]), SgdConfig(0.1, 0.0, 0.0), 0.1)
    assert net.weights[0][0, 0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_momentum_recursion():
    net, state = scalar_net(0.0), OptState()
    cfg = SgdConfig(1.0, 0.9, 0.0)
    g = Gradients([np.array([[1.0, 0.0]])])
    sgd_step(net, state, g, cfg, 1.0)
    assert net.weights[0][0, 0] == -1.0 and state.velocity[0][0, 0] == 1.0
    sgd_step(net, state, g, cfg, 1.0)
    assert net.weights[0][0, 0] == pytest.approx(-2.9, abs=1e-15)
    assert state.velocity[0][0, 0] == pytest.approx(1.9, abs=1e-15)


def test_sgd_zero_gradient_is_fixed_point():
    net = init_network([2, 3], ["identity"], "mse", 0)
    before = net.flat()
    sgd_step(net, OptState(), Gradients([np.zeros((3, 3))]), SgdConfig(0.3, 0.7, 0.0), 0.3)
    assert np.array_equal(net.flat(), before)


def test_sgd_weight_decay_is_added_to_gradient():
    net = scalar_net(2.0)
    sgd_step(net, OptState(), Gradients([np.zeros((1, 2))]), SgdConfig(0.1, 0.0, 0.5), 0.1)
    assert net.weights[0][0, 0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_clip_scale():
    assert clip_scale(0.4, 1.0, 0.1) == pytest.approx(0.5, abs=1e-15)
    assert clip_scale(0.05, 1.0, 0.1) == 1.0
    assert clip_scale(1e9, 1.0, None) == 1.0


def kfac_state(a, g):
    return OptState(kfac=FisherState([factors(a, g)]))


def test_kfac_scalar_example():
    net = Network([np.array([[5.0]])], ["identity"], "mse")
    cfg = KfacConfig(1.0, damping=1e-12, clip_kappa=None, weight_decay=0.0)
    kfac_apply(net, kfac_state([[4.0]], [[1.0]]), Gradients([np.array([[8.0]])]), cfg, 1.0)
    assert net.weights[0][0, 0] == pytest.approx(3.0, abs=1e-10)


def test_kfac_identity_factors_give_gradient_step():
    net = init_network([2, 2], ["identity"], "mse", 1)
    before = net.flat()
    grad = np.arange(6.0).reshape(2, 3) / 10
    cfg = KfacConfig(0.1, damping=1e-12, clip_kappa=1e9, weight_decay=0.0)
    kfac_apply(net, kfac_state(np.eye(3), np.eye(2)), Gradients([grad]), cfg, 0.1)
    assert np.allclose(net.flat(), before - 0.1 * grad.ravel(), atol=1e-12)


def test_kfac_clipping_bounds_the_step():
    net = Network([np.array([[0.0]])], ["identity"], "mse")
    cfg = KfacConfig(1.0, damping=1e-12, clip_kappa=0.1, weight_decay=0.0)
    # V = 2, quadratic <V, 4V> = 16, so nu = sqrt(0.1 / 16)
    kfac_apply(net, kfac_state([[4.0]], [[1.0]]), Gradients([np.array([[8.0]])]), cfg, 1.0)
    assert net.weights[0][0, 0] == pytest.approx(-2.0 * np.sqrt(0.1 / 16), rel=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_one_step_newton_on_noiseless_regression(seed):
    ds = gen_linreg(seed, 64, 1 + seed % 8, 0.0)
    net = init_network([ds.n_features, 1], ["identity"], "mse", seed)
    cfg = KfacConfig(1.0, damping=1e-8, clip_kappa=None, fisher_mode="exact", weight_decay=0.0)
    out, cap = forward(net, ds.x)
    _, grads, cap = loss_and_backward(net, cap, out, ds.y, "exact")
    kfac_step(net, OptState.for_network(net, cfg), grads, cap, cfg, 1.0)
    design = np.hstack([ds.x, np.ones((len(ds), 1))])
    w_ls, *_ = np.linalg.lstsq(design, ds.y, rcond=None)
    assert np.max(np.abs(net.weights[0][0] - w_ls)) < 1e-6


def test_config_validation_names_the_field():
    with pytest.raises(ConfigError, match="damping"):
        KfacConfig(0.1, damping=-1.0)
    with pytest.raises(ConfigError, match="momentum"):
        SgdConfig(0.1, momentum=1.0)
    with pytest.raises(ConfigError, match="lr"):
        SgdConfig(-0.1)
    with pytest.raises(ConfigError):
        optimizer_from_dict("adam", {"lr": 1.0})
    with pytest.raises(ConfigError):
        optimizer_from_dict("sgd", {"lr": 1.0, "damping": 0.1})


SMALL = dict(budget=Budget(mode="fixed_epochs", fixed_value=2), schedule=LrSchedule("fixed", ()))


def small_problem():
    ds = gen_blobs(0, 256, 4, 3, 0.3)
    return ds, init_network([4, 8, 3], ["relu", "identity"], "softmax_cross_entropy", 0)


def test_zero_lr_keeps_loss_constant():
    ds, net = small_problem()
    r = train_run(net, ds, SgdConfig(0.0), len(ds), seed=0, train_loss_eval="full", **SMALL)
    assert r.status == "completed"
    assert max(r.train_loss) - min(r.train_loss) <= 1e-12


@pytest.mark.parametrize("opt", [SgdConfig(0.1), KfacConfig(0.05)])
def test_training_is_deterministic(opt):
    ds, net = small_problem()
    a = train_run(net, ds, opt, 32, seed=3, **SMALL)
    b = train_run(net, ds, opt, 32, seed=3, **SMALL)
    assert a.to_json() == b.to_json()
    assert a.n_iterations == 2 * (256 // 32)
    assert len(a.test_accuracy) == 2


@pytest.mark.parametrize("scheme", ["normal", "approximated"])
def test_kfac_training_improves(scheme):
    ds, net = small_problem()
    r = train_run(net, ds, KfacConfig(0.05, scheme=scheme), 32, seed=1, **SMALL)
    assert r.status == "completed"
    assert r.test_accuracy[-1] > 0.9


def test_divergence_is_recorded():
    ds = gen_linreg(0, 128, 3, 0.1)
    net = init_network([3, 1], ["identity"], "mse", 0)
    r = train_run(net, ds, SgdConfig(1e100, 0.0, 0.0), 32, seed=0, **SMALL)
    assert r.diverged and r.diverged_at is not None
    assert len(r.train_loss) == r.diverged_at


def test_on_finish_receives_final_state():
    ds, net = small_problem()
    seen = {}
    train_run(net, ds, KfacConfig(0.05), 64, seed=0, on_finish=lambda n, s: seen.update(net=n, state=s), **SMALL)
    assert seen["state"].kfac.initialized
    assert not np.array_equal(seen["net"].flat(), net.flat())
