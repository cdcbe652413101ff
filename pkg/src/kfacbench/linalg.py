"""Dense real linear algebra used by the Kronecker-factored preconditioner.

Matrices are plain float64 ``numpy.ndarray`` objects of rank 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYM_TOL = 1e-9
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
MAX_CONDITION = 1e12
CLAMP_FLOOR = -1e-10


class DimensionError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a finite float64 2-D array."""
    m = np.array(x, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError("matrix contains non-finite entries")
    return m


@dataclass(frozen=True)
class SymEig:
    q: np.ndarray  # orthogonal, eigenvectors in columns
    d: np.ndarray  # eigenvalues, descending

    def reconstruct(self) -> np.ndarray:
        return (self.q * self.d) @ self.q.T

    def clamped(self) -> np.ndarray:
        """Eigenvalues with small negative drift (down to -1e-10) set to zero."""
        d = self.d.copy()
        d[(d < 0) & (d >= CLAMP_FLOOR)] = 0.0
        return d


def kron(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.size == 0 or b.size == 0:
        raise DimensionError("kron of an empty matrix")
    # out[i*br + k, j*bc + l] = a[i, j] * b[k, l]
    ar, ac = a.shape
    br, bc = b.shape
    return (a[:, None, :, None] * b[None, :, None, :]).reshape(ar * br, ac * bc)


def _check_square(s: np.ndarray) -> None:
    if s.shape[0] != s.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {s.shape}")


def _symmetrize(s) -> np.ndarray:
    s = as_matrix(s)
    _check_square(s)
    if np.max(np.abs(s - s.T), initial=0.0) > SYM_TOL * max(1.0, np.max(np.abs(s), initial=0.0)):
        raise DimensionError("matrix is not symmetric")
    return 0.5 * (s + s.T)


def _sorted(q: np.ndarray, d: np.ndarray) -> SymEig:
    order = np.argsort(-d, kind="stable")
    return SymEig(q=np.ascontiguousarray(q[:, order]), d=d[order])


def jacobi_eig(s, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> SymEig:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps over all (p, q) pairs until the off-diagonal Frobenius norm falls
    below ``tol`` times the Frobenius norm of the input.
    """
    a = _symmetrize(s).copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n == 1 or scale == 0.0:
        return _sorted(v, np.diag(a).copy())
    threshold = tol * scale

    def off_norm(m):
        return np.linalg.norm(m - np.diag(np.diag(m)))

    for _ in range(max_sweeps):
        if off_norm(a) < threshold:
            return _sorted(v, np.diag(a).copy())
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - sn * aq
                a[q, :] = sn * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    if off_norm(a) < threshold:
        return _sorted(v, np.diag(a).copy())
    raise NumericalError(f"Jacobi eigendecomposition did not converge in {max_sweeps} sweeps")


def sym_eig(s, method: str = "jacobi") -> SymEig:
    """Symmetric eigendecomposition ``s = q diag(d) q^T`` with ``d`` descending.

    ``method="jacobi"`` runs the cyclic Jacobi solver above; ``method="lapack"``
    delegates to ``numpy.linalg.eigh`` and is what the training loop uses.
    """
    if method == "jacobi":
        return jacobi_eig(s)
    if method == "lapack":
        a = _symmetrize(s)
        try:
            d, q = np.linalg.eigh(a)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(str(exc)) from exc
        return SymEig(q=np.ascontiguousarray(q[:, ::-1]), d=d[::-1].copy())
    raise ValueError(f"unknown eigensolver {method!r}")


def dense_inverse(s) -> np.ndarray:
    s = as_matrix(s)
    _check_square(s)
    cond = np.linalg.cond(s)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericalError(f"matrix is singular or ill-conditioned (cond={cond:.3g})")
    return np.linalg.inv(s)


def vec(m: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization.

    With this ordering ``vec(G @ V @ A) == kron(A, G) @ vec(V)`` for symmetric
    ``A``, so a layer block ``E[AA^T] (x) E[GG^T]`` acts on ``vec`` of the
    ``out x (in+1)`` weight gradient.
    """
    return np.asarray(m).reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return np.asarray(v).reshape(rows, cols, order="F")
