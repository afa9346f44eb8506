"""Dense float64 matrix arithmetic and the two factorizations everything else uses.

All values are 2-D C-contiguous float64 arrays. The solver stack is
deliberately small: an unpivoted Cholesky factorization for the regularized
SPD systems the closed-form head updates produce, and a cyclic Jacobi
eigensolver for the small symmetric spectra the convergence checks monitor.
Systems arriving here are explicitly regularized by the caller, so no
pivoting is needed.
"""

from __future__ import annotations

import numpy as np

from .errors import DefinitenessError, DimensionError, SymmetryError

# Relative tolerance used when checking that an input is symmetric.
SYMMETRY_RTOL = 1e-10

Matrix = np.ndarray


def as_matrix(a, require_finite: bool = True) -> Matrix:
    """Coerce to a 2-D C-contiguous float64 array, optionally checking finiteness."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if require_finite and not np.all(np.isfinite(m)):
        raise ValueError("matrix contains NaN or Inf entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def transpose(a: Matrix) -> Matrix:
    return np.ascontiguousarray(a.T)


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def sub(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return a - b


def scale(a: Matrix, c: float) -> Matrix:
    return c * a


def frobenius_norm(a: Matrix) -> float:
    return float(np.sqrt(np.sum(a * a)))


def _check_symmetric(a: Matrix, who: str) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"{who}: expected a square matrix, got {a.shape}")
    scale_ = 1.0 + float(np.max(np.abs(a)))
    if float(np.max(np.abs(a - a.T))) > SYMMETRY_RTOL * scale_:
        raise SymmetryError(f"{who}: matrix is not symmetric to {SYMMETRY_RTOL} relative")


def cholesky_factor(a: Matrix) -> Matrix:
    """Lower-triangular L with L Lᵀ = a. Raises DefinitenessError on a non-positive pivot."""
    _check_symmetric(a, "cholesky_factor")
    n = a.shape[0]
    lower = np.zeros((n, n))
    for j in range(n):
        pivot = a[j, j] - lower[j, :j] @ lower[j, :j]
        if not np.isfinite(pivot) or pivot <= 0.0:
            raise DefinitenessError(f"non-positive pivot {pivot!r} at index {j}: matrix is not SPD")
        lower[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / lower[j, j]
    return lower


def solve_spd(a: Matrix, b: Matrix) -> Matrix:
    """Solve a X = b for symmetric positive definite a via Cholesky.

    b may have any number of right-hand-side columns. Residual accuracy is
    governed by the caller-supplied regularization of a.
    """
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"solve_spd: a is {a.shape} but b has {b.shape[0]} rows")
    lower = cholesky_factor(a)
    n = a.shape[0]
    # forward substitution L y = b, then back substitution Lᵀ x = y
    y = np.empty_like(b, dtype=np.float64)
    for i in range(n):
        y[i] = (b[i] - lower[i, :i] @ y[:i]) / lower[i, i]
    x = np.empty_like(y)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - lower[i + 1 :, i] @ x[i + 1 :]) / lower[i, i]
    return x


def sym_eigvals(a: Matrix, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a small symmetric matrix, ascending, via cyclic Jacobi rotations."""
    _check_symmetric(a, "sym_eigvals")
    work = np.array(a, dtype=np.float64, copy=True)
    n = work.shape[0]
    if n == 1:
        return work.diagonal().copy()
    norm = frobenius_norm(work)
    if norm == 0.0:
        return np.zeros(n)
    for _ in range(max_sweeps):
        off = np.sqrt(max(frobenius_norm(work) ** 2 - np.sum(work.diagonal() ** 2), 0.0))
        if off <= 1e-15 * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = work[p, q]
                if abs(apq) <= 1e-18 * norm:
                    continue
                theta = (work[q, q] - work[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * work[:, p] - s * work[:, q]
                rot_q = s * work[:, p] + c * work[:, q]
                work[:, p], work[:, q] = rot_p, rot_q
                rot_p = c * work[p, :] - s * work[q, :]
                rot_q = s * work[p, :] + c * work[q, :]
                work[p, :], work[q, :] = rot_p, rot_q
    return np.sort(work.diagonal())


def spectral_norm_sym(a: Matrix) -> float:
    """Largest |eigenvalue| of a symmetric matrix."""
    vals = sym_eigvals(a)
    return float(max(abs(vals[0]), abs(vals[-1])))


def random_spd(n: int, rng: np.random.Generator, jitter: float = 1e-3) -> Matrix:
    """M Mᵀ + jitter·I for Gaussian M; convenient SPD test/kernel factory."""
    m = rng.standard_normal((n, n))
    return m @ m.T / n + jitter * np.eye(n)
