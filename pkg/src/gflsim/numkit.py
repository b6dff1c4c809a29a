"""Small dense linear-algebra kit.

Matrices are plain ``numpy`` float64 arrays.  The symmetric eigensolver is a
cyclic Jacobi method so results do not depend on the LAPACK build.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_EPS = 1e-12


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # orthonormal columns

    def reconstruct(self) -> np.ndarray:
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


def as_matrix(m) -> np.ndarray:
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction; 1-d input is treated as one row."""
    z = np.asarray(m, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(y, p) -> float:
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"label shape {y.shape} does not match probability shape {p.shape}")
    return float(-np.sum(y * np.log(np.maximum(p, PROB_EPS))))


def sym_eig(m, max_sweeps: int = 100) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius norm drops below
    ``1e-12 * ||m||_F``.
    """
    a = as_matrix(m)
    n, k = a.shape
    if n != k:
        raise ValueError(f"sym_eig needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * scale:
        raise ValueError("sym_eig needs a symmetric matrix")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if n > 1 and norm > 0.0:
        target = 1e-12 * norm
        for _ in range(max_sweeps):
            off = np.linalg.norm(a - np.diag(np.diag(a)))
            if off < target:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    if abs(apq) < 1e-300 * (1.0 + abs(a[p, p]) + abs(a[q, q])) or abs(apq) < 1e-18 * target:
                        # below anything the stopping rule can see
                        a[p, q] = a[q, p] = 0.0
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if abs(theta) > 1e150:
                        t = 0.5 / theta
                    else:
                        t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    c = 1.0 / np.sqrt(t * t + 1.0)
                    s = t * c
                    col_p = a[:, p].copy()
                    col_q = a[:, q]
                    a[:, p] = c * col_p - s * col_q
                    a[:, q] = s * col_p + c * col_q
                    row_p = a[p, :].copy()
                    row_q = a[q, :]
                    a[p, :] = c * row_p - s * row_q
                    a[q, :] = s * row_p + c * row_q
                    vp = v[:, p].copy()
                    vq = v[:, q]
                    v[:, p] = c * vp - s * vq
                    v[:, q] = s * vp + c * vq
        else:
            raise RuntimeError("Jacobi sweeps did not converge")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return EigenDecomposition(w[order], v[:, order])


def pinv_psd(m, tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric PSD matrix.

    Eigenvalues below ``tol * lambda_max`` are treated as zero.
    """
    eig = sym_eig(m)
    w = eig.eigenvalues
    if w.size == 0:
        return np.zeros((0, 0))
    top = float(w[-1])
    if w[0] < -tol * max(1.0, abs(top)):
        raise ValueError(f"matrix is not PSD: smallest eigenvalue {w[0]:.3e}")
    if top <= 0.0:
        return np.zeros_like(eig.eigenvectors)
    inv = np.where(w > tol * top, 1.0 / np.where(w > tol * top, w, 1.0), 0.0)
    q = eig.eigenvectors
    return (q * inv) @ q.T
