"""Multilayer perceptron exposing per-layer inputs and pre-activation gradients.

Each layer holds one ``out x (in+1)`` weight matrix; the last column is the
bias, applied to a constant 1 appended to the layer input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .linalg import DimensionError
from .seeding import stream

ACTIVATIONS = ("relu", "tanh", "identity")
LOSSES = ("softmax_cross_entropy", "mse")
FISHER_MODES = ("empirical", "sampled", "exact")


class LabelError(ValueError):
    pass


@dataclass
class Network:
    weights: list[np.ndarray]
    activations: list[str]
    loss: str

    def __post_init__(self):
        if len(self.weights) != len(self.activations) or not self.weights:
            raise DimensionError("need one activation per layer and at least one layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.activations[-1] != "identity":
            raise ValueError("the output layer must use the identity activation")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        for prev, w in zip(self.weights, self.weights[1:]):
            if w.shape[1] != prev.shape[0] + 1:
                raise DimensionError(f"layer of shape {w.shape} cannot follow one of shape {prev.shape}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1] - 1] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights)

    def copy(self) -> "Network":
        return Network([w.copy() for w in self.weights], list(self.activations), self.loss)

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def with_flat(self, theta: np.ndarray) -> "Network":
        out, pos = [], 0
        for w in self.weights:
            out.append(np.asarray(theta[pos : pos + w.size], dtype=np.float64).reshape(w.shape).copy())
            pos += w.size
        return Network(out, list(self.activations), self.loss)

    def to_json(self) -> str:
        return json.dumps(
            {
                "sizes": self.sizes,
                "activations": self.activations,
                "loss": self.loss,
                "weights": [w.ravel().tolist() for w in self.weights],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Network":
        d = json.loads(text)
        sizes = d["sizes"]
        ws = [
            np.array(flat, dtype=np.float64).reshape(sizes[i + 1], sizes[i] + 1)
            for i, flat in enumerate(d["weights"])
        ]
        return cls(ws, list(d["activations"]), d["loss"])


def init_network(sizes, activations, loss: str, seed: int) -> Network:
    """Glorot-uniform weights, zero bias column."""
    rng = stream(seed, "init")
    ws = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = np.zeros((fan_out, fan_in + 1))
        w[:, :-1] = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        ws.append(w)
    return Network(ws, list(activations), loss)


@dataclass
class LayerCapture:
    """Per-layer ``a_in`` (batch x in+1) and ``g_out`` (rows x out).

    ``g_out`` has ``batch_size`` rows except in ``exact`` Fisher mode, where
    each sample contributes one row per output unit so that
    ``g_out.T @ g_out / batch_size`` is the exact expectation over the model's
    predictive distribution.
    """

    a_in: list[np.ndarray]
    z: list[np.ndarray]
    batch_size: int
    g_out: list[np.ndarray] | None = None
    fisher_mode: str | None = None

    @property
    def complete(self) -> bool:
        return self.g_out is not None


@dataclass
class Gradients:
    dw: list[np.ndarray] = field(default_factory=list)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_deriv(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def forward(net: Network, x_batch: np.ndarray) -> tuple[np.ndarray, LayerCapture]:
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.ndim != 2 or x_batch.shape[1] != net.sizes[0]:
        raise DimensionError(f"expected input of width {net.sizes[0]}, got shape {x_batch.shape}")
    ones = np.ones((x_batch.shape[0], 1))
    h = x_batch
    a_in, zs = [], []
    for w, act in zip(net.weights, net.activations):
        a = np.hstack([h, ones])
        z = a @ w.T
        a_in.append(a)
        zs.append(z)
        h = _act(act, z)
    return h, LayerCapture(a_in=a_in, z=zs, batch_size=x_batch.shape[0])


def _targets_matrix(net: Network, outputs: np.ndarray, targets) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.shape[0] != outputs.shape[0]:
        raise DimensionError(f"{outputs.shape[0]} outputs but {targets.shape[0]} targets")
    if net.loss == "softmax_cross_entropy":
        labels = targets.astype(np.int64)
        if labels.ndim != 1:
            raise DimensionError("classification targets must be a label vector")
        k = outputs.shape[1]
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise LabelError(f"labels must lie in [0, {k})")
        return labels
    t = targets.astype(np.float64)
    if t.ndim == 1:
        t = t[:, None]
    if t.shape != outputs.shape:
        raise DimensionError(f"regression targets of shape {t.shape} do not match outputs {outputs.shape}")
    return t


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def per_sample_loss(net: Network, outputs: np.ndarray, targets) -> np.ndarray:
    t = _targets_matrix(net, outputs, targets)
    if net.loss == "softmax_cross_entropy":
        m = outputs.max(axis=1)
        lse = m + np.log(np.exp(outputs - m[:, None]).sum(axis=1))
        return lse - outputs[np.arange(outputs.shape[0]), t]
    return 0.5 * np.sum((outputs - t) ** 2, axis=1)


def _output_grad(net: Network, outputs: np.ndarray, t: np.ndarray) -> np.ndarray:
    if net.loss == "softmax_cross_entropy":
        g = _softmax(outputs)
        g[np.arange(outputs.shape[0]), t] -= 1.0
        return g
    return outputs - t


def _fisher_output_grad(net: Network, outputs: np.ndarray, mode: str, seed: int) -> np.ndarray:
    n, k = outputs.shape
    if mode == "sampled":
        rng = stream(seed, "fisher-targets")
        if net.loss == "softmax_cross_entropy":
            p = _softmax(outputs)
            u = rng.random(n)
            cdf = np.cumsum(p, axis=1)
            drawn = np.minimum((cdf < u[:, None]).sum(axis=1), k - 1)
            return _output_grad(net, outputs, drawn)
        return -rng.standard_normal((n, k))
    # exact: one row per output unit, stacked unit-major
    if net.loss == "softmax_cross_entropy":
        p = _softmax(outputs)
        rows = [np.sqrt(p[:, [j]]) * (np.eye(k)[j] - p) for j in range(k)]
        return np.vstack(rows)
    return np.repeat(np.eye(k), n, axis=0)


def _backprop(net: Network, capture: LayerCapture, g_last: np.ndarray) -> list[np.ndarray]:
    reps = g_last.shape[0] // capture.batch_size
    g = g_last
    out = [g]
    for i in range(len(net.weights) - 1, 0, -1):
        dh = g @ net.weights[i][:, :-1]
        d = _act_deriv(net.activations[i - 1], capture.z[i - 1])
        if reps > 1:
            d = np.tile(d, (reps, 1))
        g = dh * d
        out.append(g)
    out.reverse()
    return out


def loss_and_backward(
    net: Network,
    capture: LayerCapture,
    outputs: np.ndarray,
    targets,
    fisher_mode: str = "sampled",
    seed: int = 0,
) -> tuple[float, Gradients, LayerCapture]:
    """Mean loss, averaged gradients and the completed layer capture.

    The loss and gradients always use the true ``targets``; the recorded
    ``g_out`` uses targets chosen by ``fisher_mode``.
    """
    if fisher_mode not in FISHER_MODES:
        raise ValueError(f"unknown fisher_mode {fisher_mode!r}")
    t = _targets_matrix(net, outputs, targets)
    losses = per_sample_loss(net, outputs, t)
    b = outputs.shape[0]
    g_true = _backprop(net, capture, _output_grad(net, outputs, t))
    grads = Gradients([g.T @ a / b for g, a in zip(g_true, capture.a_in)])
    if fisher_mode == "empirical":
        g_fisher = g_true
    else:
        g_fisher = _backprop(net, capture, _fisher_output_grad(net, outputs, fisher_mode, seed))
    capture.g_out = g_fisher
    capture.fisher_mode = fisher_mode
    return float(losses.mean()), grads, capture


def evaluate(net: Network, ds, chunk: int = 4096) -> tuple[float, float | None]:
    """Mean loss and argmax accuracy (``None`` for regression)."""
    total, correct = 0.0, 0
    n = len(ds)
    for start in range(0, n, chunk):
        xb = ds.x[start : start + chunk]
        yb = ds.y[start : start + chunk]
        out, _ = forward(net, xb)
        total += float(per_sample_loss(net, out, yb).sum())
        if net.loss == "softmax_cross_entropy":
            correct += int(np.sum(np.argmax(out, axis=1) == yb))
    acc = correct / n if net.loss == "softmax_cross_entropy" else None
    return total / n, acc
