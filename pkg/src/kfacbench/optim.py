"""SGD with momentum, damped K-FAC, and the single-run training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import budget as budget_mod
from .budget import Budget, LrSchedule
from .data import BatchPlan, Dataset, batches
from .fisher import SCHEMES, FisherState, damped_quadratic, precondition, update_factors
from .linalg import NumericalError
from .model import FISHER_MODES, Gradients, Network, evaluate, forward, loss_and_backward
from .records import COMPLETED, DIVERGED, RunRecord
from .seeding import derive_seed

DEFAULT_WEIGHT_DECAY = 5e-4


class ConfigError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SgdConfig:
    lr: float
    momentum: float = 0.9
    weight_decay: float = DEFAULT_WEIGHT_DECAY

    name = "sgd"

    def __post_init__(self):
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr: must be a non-negative finite number, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum: must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight_decay: must be non-negative, got {self.weight_decay}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class KfacConfig:
    lr: float
    damping: float = 1e-3
    decay: float = 0.9
    clip_kappa: float | None = 0.1
    scheme: str = "normal"
    fisher_mode: str = "sampled"
    t_inv: int = 1
    weight_decay: float = DEFAULT_WEIGHT_DECAY

    name = "kfac"

    def __post_init__(self):
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr: must be a non-negative finite number, got {self.lr}")
        if not self.damping > 0:
            raise ConfigError(f"damping: must be positive, got {self.damping}")
        if not 0 < self.decay < 1:
            raise ConfigError(f"decay: must lie in (0, 1), got {self.decay}")
        if self.clip_kappa is not None and not self.clip_kappa > 0:
            raise ConfigError(f"clip_kappa: must be positive or disabled, got {self.clip_kappa}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme: must be one of {SCHEMES}, got {self.scheme!r}")
        if self.fisher_mode not in FISHER_MODES:
            raise ConfigError(f"fisher_mode: must be one of {FISHER_MODES}, got {self.fisher_mode!r}")
        if self.t_inv < 1:
            raise ConfigError(f"t_inv: must be at least 1, got {self.t_inv}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight_decay: must be non-negative, got {self.weight_decay}")

    def to_dict(self) -> dict:
        return asdict(self)


def optimizer_from_dict(name: str, hyper: dict) -> SgdConfig | KfacConfig:
    cls = {"sgd": SgdConfig, "kfac": KfacConfig}.get(name)
    if cls is None:
        raise ConfigError(f"optimizer: unknown optimizer {name!r}")
    try:
        return cls(**hyper)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


@dataclass
class OptState:
    velocity: list[np.ndarray] | None = None
    kfac: FisherState | None = None

    @classmethod
    def for_network(cls, net: Network, cfg=None) -> "OptState":
        if isinstance(cfg, KfacConfig):
            return cls(kfac=FisherState.for_shapes([w.shape for w in net.weights], cfg.t_inv))
        return cls(velocity=[np.zeros_like(w) for w in net.weights])


def _decayed(grads: Gradients, net: Network, wd: float) -> list[np.ndarray]:
    if wd == 0:
        return list(grads.dw)
    return [g + wd * w for g, w in zip(grads.dw, net.weights)]


def sgd_step(net: Network, state: OptState, grads: Gradients, cfg: SgdConfig, lr_now: float):
    """Heavy-ball update ``v <- mu v + g``, ``W <- W - lr v``."""
    if len(grads.dw) != len(net.weights):
        raise ValueError("gradient list does not match the network")
    if state.velocity is None:
        state.velocity = [np.zeros_like(w) for w in net.weights]
    g = _decayed(grads, net, cfg.weight_decay)
    for i, gi in enumerate(g):
        if gi.shape != net.weights[i].shape:
            raise ValueError(f"gradient shape {gi.shape} does not match weight {net.weights[i].shape}")
        state.velocity[i] = cfg.momentum * state.velocity[i] + gi
        net.weights[i] = net.weights[i] - lr_now * state.velocity[i]
    return net, state


def clip_scale(quad_sum: float, lr_now: float, kappa: float | None) -> float:
    """``min(1, sqrt(kappa / (lr^2 * sum_i <V_i, F_i V_i>)))``."""
    if kappa is None:
        return 1.0
    q = lr_now * lr_now * quad_sum
    if not q > kappa:
        return 1.0
    return math.sqrt(kappa / q)


def kfac_apply(net: Network, state: OptState, grads: Gradients, cfg: KfacConfig, lr_now: float):
    """Precondition, clip and apply an update using the current factors."""
    fs = state.kfac
    g = _decayed(grads, net, cfg.weight_decay)
    vs = [precondition(lf, gi, cfg.scheme, cfg.damping, fs.eig_method) for lf, gi in zip(fs.layers, g)]
    quad = sum(damped_quadratic(lf, v, cfg.scheme, cfg.damping) for lf, v in zip(fs.layers, vs))
    nu = clip_scale(quad, lr_now, cfg.clip_kappa)
    step = lr_now * nu
    new = [w - step * v for w, v in zip(net.weights, vs)]
    if not all(np.all(np.isfinite(w)) for w in new):
        raise DivergenceError("non-finite K-FAC update")
    net.weights[:] = new
    return net, state


def kfac_step(net: Network, state: OptState, grads: Gradients, capture, cfg: KfacConfig, lr_now: float):
    if state.kfac is None:
        state.kfac = FisherState.for_shapes([w.shape for w in net.weights], cfg.t_inv)
    update_factors(state.kfac, capture, cfg.decay)
    return kfac_apply(net, state, grads, cfg, lr_now)


def run_config(opt_cfg, batch_size: int, budget: Budget, schedule: LrSchedule, replica: int = 0) -> dict:
    return {
        "optimizer": opt_cfg.name,
        "batch_size": int(batch_size),
        "hyper": opt_cfg.to_dict(),
        "budget": budget.to_dict(),
        "schedule": schedule.to_dict(),
        "replica": int(replica),
    }


def train_run(
    net0: Network,
    ds: Dataset,
    opt_cfg: SgdConfig | KfacConfig,
    batch_size: int,
    budget: Budget,
    schedule: LrSchedule,
    seed: int,
    test: Dataset | None = None,
    record_every: int = 1,
    drop_last: bool = True,
    train_loss_eval: str = "batch",
    config: dict | None = None,
    on_finish=None,
) -> RunRecord:
    """Train a copy of ``net0`` and record its loss/accuracy trace.

    ``train_loss_eval="batch"`` records the mini-batch loss seen by each
    iteration; ``"full"`` records the loss over the whole training set at the
    same parameters. Both are measured before that iteration's update.
    ``on_finish(net, state)`` is called with the final network and optimizer state.
    """
    if record_every < 1:
        raise ConfigError("record_every: must be at least 1")
    if train_loss_eval not in ("batch", "full"):
        raise ConfigError(f"train_loss_eval: unknown mode {train_loss_eval!r}")
    n = len(ds)
    plan = BatchPlan(batch_size, seed, drop_last)
    plan.validate(n)
    total = budget_mod.total_epochs(budget, batch_size, n)
    ipe = plan.iterations_per_epoch(n)
    test = test if test is not None else ds
    is_kfac = isinstance(opt_cfg, KfacConfig)
    fisher_mode = opt_cfg.fisher_mode if is_kfac else "empirical"

    net = net0.copy()
    state = OptState.for_network(net, opt_cfg)
    train_loss: list[float] = []
    test_acc: list[float | None] = []
    test_loss: list[float] = []
    status, diverged_at, it = COMPLETED, None, 0

    with np.errstate(all="ignore"):
        for epoch in range(total):
            lr_now = opt_cfg.lr * budget_mod.lr_multiplier(schedule, epoch, total)
            for idx in batches(n, plan, epoch):
                out, cap = forward(net, ds.x[idx])
                if is_kfac:
                    loss, grads, cap = loss_and_backward(
                        net, cap, out, ds.y[idx], fisher_mode, derive_seed(seed, f"fisher:{it}")
                    )
                else:
                    loss, grads, cap = loss_and_backward(net, cap, out, ds.y[idx], "empirical")
                if train_loss_eval == "full" and it % record_every == 0:
                    loss = evaluate(net, ds)[0]
                if not math.isfinite(loss):
                    status, diverged_at = DIVERGED, it
                    break
                if it % record_every == 0:
                    train_loss.append(loss)
                try:
                    if is_kfac:
                        kfac_step(net, state, grads, cap, opt_cfg, lr_now)
                    else:
                        sgd_step(net, state, grads, opt_cfg, lr_now)
                except (DivergenceError, NumericalError):
                    status, diverged_at = DIVERGED, it
                    break
                it += 1
            if status == DIVERGED:
                break
            tl, ta = evaluate(net, test)
            if not math.isfinite(tl):
                status, diverged_at = DIVERGED, it
                break
            test_loss.append(tl)
            test_acc.append(ta)

    if on_finish is not None:
        on_finish(net, state)
    cfg = config if config is not None else run_config(opt_cfg, batch_size, budget, schedule)
    return RunRecord(
        config=cfg,
        train_loss=train_loss,
        test_accuracy=test_acc,
        test_loss=test_loss,
        iterations_per_epoch=ipe,
        total_epochs=total,
        n_iterations=it,
        record_every=record_every,
        status=status,
        diverged_at=diverged_at,
    )
