"""
Complex linear algebra and random sampling primitives.

Everything here works on ``numpy`` arrays of dtype ``complex128``; matrices
are plain 2-D arrays and vectors 1-D arrays.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConditioningError, DomainError, NumericalError, StructuralError

HERMITIAN_TOL = 1e-10
MAX_CONDITION = 1e10


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues sorted descending and matching orthonormal eigenvectors (columns)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.conj().T


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2:
        raise StructuralError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def is_hermitian(a: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    a = _as_matrix(a)
    if a.shape[0] != a.shape[1]:
        return False
    scale = max(1.0, float(np.max(np.abs(a), initial=0.0)))
    return bool(np.max(np.abs(a - a.conj().T), initial=0.0) <= tol * scale)


def hermitian_eig(a, tol: float = 1e-14, max_sweeps: int = 60) -> EigenDecomposition:
    """
    Eigendecomposition of a Hermitian matrix by cyclic Jacobi rotations.

    Each sweep visits every (p, q) pair once and zeroes the off-diagonal
    entry with a unitary plane rotation. Sweeps repeat until the off-diagonal
    Frobenius norm drops below ``tol * ||A||_F``.

    Parameters
    ----------
    a : array_like
        Square Hermitian matrix.
    tol : float
        Relative convergence threshold on the off-diagonal mass.
    max_sweeps : int
        Maximum number of full sweeps before giving up.

    Returns
    -------
    EigenDecomposition
        Eigenvalues in descending order, eigenvectors as columns.

    Raises
    ------
    StructuralError
        If the matrix is not square or not Hermitian within 1e-10.
    NumericalError
        If the sweeps do not converge; ``iterations`` carries the sweep count.
    """
    a = _as_matrix(a)
    n, m = a.shape
    if n != m:
        raise StructuralError(f"matrix must be square, got {a.shape}")
    if not is_hermitian(a):
        raise StructuralError("matrix is not Hermitian within tolerance")

    a = 0.5 * (a + a.conj().T)
    v = np.eye(n, dtype=complex)
    norm = np.linalg.norm(a)
    if n == 1 or norm == 0.0:
        return _sorted(np.real(np.diag(a)).copy(), v)

    threshold = tol * norm
    pairs = [(p, q) for p in range(n - 1) for q in range(p + 1, n)]
    for sweep in range(1, max_sweeps + 1):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= threshold:
            return _sorted(np.real(np.diag(a)).copy(), v)
        for p, q in pairs:
            apq = a[p, q]
            mag = abs(apq)
            if mag <= 1e-300:
                continue
            app, aqq = a[p, p].real, a[q, q].real
            tau = (aqq - app) / (2.0 * mag)
            t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            e = apq / mag
            g = np.array([[c, s * e], [-s * np.conj(e), c]])
            idx = [p, q]
            a[:, idx] = a[:, idx] @ g
            a[idx, :] = g.conj().T @ a[idx, :]
            a[q, p] = 0.0
            a[p, q] = 0.0
            v[:, idx] = v[:, idx] @ g
    raise NumericalError(
        f"Jacobi eigensolver did not converge after {max_sweeps} sweeps",
        iterations=max_sweeps,
    )


def _sorted(w: np.ndarray, v: np.ndarray) -> EigenDecomposition:
    order = np.argsort(-w, kind="stable")
    return EigenDecomposition(w[order], v[:, order])


def condition_number(a) -> float:
    a = _as_matrix(a)
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[-1] == 0.0:
        return float("inf")
    return float(sv[0] / sv[-1])


def projector(columns) -> np.ndarray:
    """Orthogonal projector ``A (A^H A)^-1 A^H`` onto the span of ``columns``."""
    a = _as_matrix(columns)
    if a.shape[1] > a.shape[0]:
        raise ConditioningError(
            f"{a.shape[1]} columns cannot be independent in dimension {a.shape[0]}",
            float("inf"),
        )
    cond = condition_number(a)
    if not cond < MAX_CONDITION:
        raise ConditioningError(
            f"columns are rank deficient (condition number {cond:.3e})", cond
        )
    q, _ = np.linalg.qr(a)
    return q @ q.conj().T


def least_squares(a, y) -> np.ndarray:
    """Solve ``argmin_s ||y - A s||^2`` for a full-column-rank ``A``."""
    a = _as_matrix(a)
    y = np.asarray(y, dtype=complex)
    if y.shape != (a.shape[0],):
        raise StructuralError(f"vector of length {a.shape[0]} expected, got {y.shape}")
    cond = condition_number(a) if a.shape[1] <= a.shape[0] else float("inf")
    if not cond < MAX_CONDITION:
        raise ConditioningError(
            f"least-squares system is rank deficient (condition number {cond:.3e})",
            cond,
        )
    s, *_ = np.linalg.lstsq(a, y, rcond=None)
    return s


def sample_complex_gaussian(n: int, variance: float, rng: np.random.Generator) -> np.ndarray:
    """Circularly symmetric complex Gaussian vector with per-entry variance ``variance``."""
    if variance <= 0:
        raise DomainError(f"variance must be positive, got {variance}")
    if n < 0:
        raise DomainError(f"count must be non-negative, got {n}")
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
