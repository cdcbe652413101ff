"""Kronecker-factored Fisher blocks and their damped inverses.

Layer ``i`` keeps ``a_factor ~ E[a a^T]`` over its homogeneous inputs and
``g_factor ~ E[g g^T]`` over its pre-activation gradients. The block
``F_i = a_factor (x) g_factor`` acts on the column-stacked ``out x (in+1)``
weight gradient (see :func:`kfacbench.linalg.vec`), which makes every
preconditioned update a two-sided matrix product.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import DimensionError, NumericalError, SymEig, dense_inverse, sym_eig
from .model import LayerCapture

SCHEMES = ("normal", "approximated")


@dataclass(frozen=True)
class DampingScheme:
    kind: str = "normal"
    lam: float = 1e-3

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown damping scheme {self.kind!r}")
        if not self.lam > 0:
            raise ValueError(f"damping must be positive, got {self.lam}")


@dataclass
class LayerFactors:
    a_factor: np.ndarray
    g_factor: np.ndarray
    eig_a: SymEig | None = None
    eig_g: SymEig | None = None
    steps_since_inversion: int = 0
    initialized: bool = False

    def eigs(self, method: str = "lapack") -> tuple[SymEig, SymEig]:
        if self.eig_a is None or self.eig_g is None:
            self.eig_a = sym_eig(self.a_factor, method)
            self.eig_g = sym_eig(self.g_factor, method)
            self.steps_since_inversion = 0
        return self.eig_a, self.eig_g


@dataclass
class FisherState:
    layers: list[LayerFactors] = field(default_factory=list)
    t_inv: int = 1
    eig_method: str = "lapack"

    @classmethod
    def for_shapes(cls, shapes, t_inv: int = 1, eig_method: str = "lapack") -> "FisherState":
        """Empty state for layers with weight shapes ``(out, in+1)``."""
        if t_inv < 1:
            raise ValueError("inversion period must be at least 1")
        layers = [LayerFactors(np.zeros((c, c)), np.zeros((r, r))) for r, c in shapes]
        return cls(layers, t_inv, eig_method)

    @property
    def initialized(self) -> bool:
        return bool(self.layers) and all(lf.initialized for lf in self.layers)

    def spectra(self) -> list[dict]:
        out = []
        for i, lf in enumerate(self.layers):
            ea, eg = lf.eigs(self.eig_method)
            out.append(
                {
                    "layer": i,
                    "a_eigenvalues": ea.d.tolist(),
                    "g_eigenvalues": eg.d.tolist(),
                    "a_condition": _condition(ea.d),
                    "g_condition": _condition(eg.d),
                }
            )
        return out

    def spectra_json(self) -> str:
        return json.dumps(self.spectra(), indent=2, sort_keys=True)


def _condition(d: np.ndarray) -> float | None:
    lo, hi = float(np.min(d)), float(np.max(d))
    return hi / lo if lo > 0 else None


def batch_statistics(capture: LayerCapture) -> list[tuple[np.ndarray, np.ndarray]]:
    if not capture.complete:
        raise ValueError("capture has no backward-pass gradients")
    b = capture.batch_size
    out = []
    for a, g in zip(capture.a_in, capture.g_out):
        sa = a.T @ a / b
        sg = g.T @ g / b
        out.append((0.5 * (sa + sa.T), 0.5 * (sg + sg.T)))
    return out


def update_factors(state: FisherState, capture: LayerCapture, decay: float = 0.9) -> FisherState:
    """Exponential moving average of the factor estimates, seeded by the first batch."""
    if not 0.0 < decay < 1.0:
        raise ValueError(f"decay must lie in (0, 1), got {decay}")
    stats = batch_statistics(capture)
    if len(stats) != len(state.layers):
        raise DimensionError(f"capture has {len(stats)} layers, state has {len(state.layers)}")
    for lf, (sa, sg) in zip(state.layers, stats):
        if sa.shape != lf.a_factor.shape or sg.shape != lf.g_factor.shape:
            raise DimensionError("capture shapes do not match the Fisher state")
        if lf.initialized:
            lf.a_factor = decay * lf.a_factor + (1.0 - decay) * sa
            lf.g_factor = decay * lf.g_factor + (1.0 - decay) * sg
        else:
            lf.a_factor = sa.copy()
            lf.g_factor = sg.copy()
            lf.initialized = True
        lf.steps_since_inversion += 1
        if lf.steps_since_inversion >= state.t_inv:
            lf.eig_a = lf.eig_g = None
            lf.steps_since_inversion = 0
    return state


def precondition_normal(lf: LayerFactors, grad: np.ndarray, lam: float, method: str = "lapack") -> np.ndarray:
    """Solve ``(a_factor (x) g_factor + lam I) vec(V) = vec(grad)`` in eigenbases.

    ``lam == 0`` is accepted only when every eigenvalue product is positive.
    """
    if lam < 0:
        raise ValueError(f"damping must be non-negative, got {lam}")
    ea, eg = lf.eigs(method)
    denom = np.outer(eg.clamped(), ea.clamped()) + lam
    if np.any(denom <= 0):
        raise NumericalError("damped Kronecker block is singular")
    inner = eg.q.T @ grad @ ea.q
    return eg.q @ (inner / denom) @ ea.q.T


def _shifted_solve(factor: np.ndarray, shift: float, rhs: np.ndarray) -> np.ndarray:
    m = factor + shift * np.eye(factor.shape[0])
    if shift == 0.0:
        return dense_inverse(m) @ rhs
    try:
        return np.linalg.solve(m, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(str(exc)) from exc


def precondition_approx(lf: LayerFactors, grad: np.ndarray, lam: float) -> np.ndarray:
    """``(g_factor + sqrt(lam) I)^-1 grad (a_factor + sqrt(lam) I)^-1``."""
    if lam < 0:
        raise ValueError(f"damping must be non-negative, got {lam}")
    shift = math.sqrt(lam)
    left = _shifted_solve(lf.g_factor, shift, grad)
    return _shifted_solve(lf.a_factor, shift, left.T).T


def precondition(lf: LayerFactors, grad: np.ndarray, scheme: DampingScheme | str, lam: float | None = None,
                 method: str = "lapack") -> np.ndarray:
    if isinstance(scheme, DampingScheme):
        kind, lam = scheme.kind, scheme.lam
    else:
        kind = scheme
    if kind == "normal":
        return precondition_normal(lf, grad, lam, method)
    if kind == "approximated":
        return precondition_approx(lf, grad, lam)
    raise ValueError(f"unknown damping scheme {kind!r}")


def damped_quadratic(lf: LayerFactors, v: np.ndarray, kind: str, lam: float) -> float:
    """``vec(V)^T F_damped vec(V)`` for the damped block the scheme inverts."""
    if kind == "normal":
        return float(np.sum(v * (lf.g_factor @ v @ lf.a_factor)) + lam * np.sum(v * v))
    shift = math.sqrt(lam)
    ga = lf.g_factor + shift * np.eye(lf.g_factor.shape[0])
    aa = lf.a_factor + shift * np.eye(lf.a_factor.shape[0])
    return float(np.sum(v * (ga @ v @ aa)))
