"""Small dense linear algebra used by the optimizers and their diagnostics.

Matrices are plain float64 ``numpy`` arrays. Every public function returns a
fresh array and never mutates its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from .errors import NumericError, ShapeError

NS_EPS = 1e-12
MAX_JACOBI_SWEEPS = 60

# Fixed quintic from the Muon reference implementation.
NS_FIXED = ((3.4445, -4.7750, 2.0315),)
# Per-iteration quintic schedule; the last tuple repeats past five iterations.
NS_SCHEDULE = (
    (4.0848, -6.8946, 2.9270),
    (3.9505, -6.3029, 2.6377),
    (3.7418, -5.5913, 2.3037),
    (2.8769, -3.1427, 1.2046),
    (2.8366, -3.0525, 1.2012),
)

Coefficients = Union[str, Sequence[Tuple[float, float, float]]]


def as_matrix(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    return arr


def check_finite(x: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name}: non-finite entries")
    return x


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    return a @ b


def hadamard_square(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * x


def abs_elementwise(x) -> np.ndarray:
    return np.abs(np.asarray(x, dtype=np.float64))


def _spd_solve(gram: np.ndarray, rhs: np.ndarray, name: str) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"{name}: damped Gram matrix is not positive definite") from exc
    return check_finite(scipy.linalg.cho_solve(factor, rhs, check_finite=False), name)


def damped_right_pinv(a, lam: float) -> np.ndarray:
    """Return ``a.T @ inv(a @ a.T + lam * I)`` for an ``r x q`` factor.

    Only the ``r x r`` system is factorized, so the cost is ``O(q r^2 + r^3)``.
    The spectral norm of the result never exceeds ``1 / (2 sqrt(lam))``.
    """
    if not lam > 0:
        raise ValueError(f"damping must be positive, got {lam}")
    a = as_matrix(a, "a")
    check_finite(a, "a")
    r = a.shape[0]
    gram = a @ a.T + lam * np.eye(r)
    # gram is symmetric, so solving gram @ X = a gives X = pinv.T
    return _spd_solve(gram, a, "damped_right_pinv").T


def damped_left_pinv(b, lam: float) -> np.ndarray:
    """Return ``inv(b.T @ b + lam * I) @ b.T`` for a ``p x r`` factor."""
    if not lam > 0:
        raise ValueError(f"damping must be positive, got {lam}")
    b = as_matrix(b, "b")
    check_finite(b, "b")
    r = b.shape[1]
    gram = b.T @ b + lam * np.eye(r)
    return _spd_solve(gram, b.T, "damped_left_pinv")


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        k = len(self.singular_values) if rank is None else rank
        return (self.u[:, :k] * self.singular_values[:k]) @ self.v[:, :k].T


def _jacobi_columns(x: np.ndarray, tol: float) -> Tuple[np.ndarray, np.ndarray]:
    # One-sided Jacobi: rotate column pairs of w until mutually orthogonal.
    w = x.copy()
    n = w.shape[1]
    v = np.eye(n)
    for _ in range(MAX_JACOBI_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = w[:, i] @ w[:, i]
                beta = w[:, j] @ w[:, j]
                gamma = w[:, i] @ w[:, j]
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wi, wj = w[:, i].copy(), w[:, j]
                w[:, i] = c * wi - s * wj
                w[:, j] = s * wi + c * wj
                vi, vj = v[:, i].copy(), v[:, j]
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if not rotated:
            return w, v
    raise NumericError(f"svd_small: no convergence after {MAX_JACOBI_SWEEPS} sweeps")


def _complete_orthonormal(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    # Replace unfilled columns with unit vectors orthogonal to the rest.
    u = u.copy()
    p = u.shape[0]
    basis = [u[:, k] for k in range(u.shape[1]) if filled[k]]
    candidates = iter(np.eye(p))
    for k in range(u.shape[1]):
        if filled[k]:
            continue
        for e in candidates:
            vec = e.copy()
            for _ in range(2):
                for b in basis:
                    vec -= (b @ vec) * b
            norm = np.linalg.norm(vec)
            if norm > 1e-8:
                u[:, k] = vec / norm
                basis.append(u[:, k])
                break
    return u


def svd_small(x, tol: float = 1e-15) -> SvdResult:
    """Thin SVD by one-sided Jacobi on the smaller dimension.

    Singular values are non-increasing and each left singular vector has a
    non-negative first nonzero entry.
    """
    x = as_matrix(x, "x")
    check_finite(x, "x")
    p, q = x.shape
    if max(p, q) > 512:
        raise ShapeError(f"svd_small is a desk-scale oracle; got shape {x.shape}")
    transposed = p < q
    work = x.T if transposed else x
    w, v = _jacobi_columns(work, tol)
    s = np.linalg.norm(w, axis=0)
    order = np.argsort(-s, kind="stable")
    s, w, v = s[order], w[:, order], v[:, order]
    scale = s[0] if s.size and s[0] > 0 else 1.0
    filled = s > scale * 1e-13
    u = np.zeros_like(w)
    u[:, filled] = w[:, filled] / s[filled]
    s = np.where(filled, s, 0.0)
    if not filled.all():
        u = _complete_orthonormal(u, filled)
    if transposed:
        u, v = v, u
    for k in range(u.shape[1]):
        nz = np.flatnonzero(np.abs(u[:, k]) > 1e-12)
        if nz.size and u[nz[0], k] < 0:
            u[:, k] = -u[:, k]
            v[:, k] = -v[:, k]
    return SvdResult(u=u, singular_values=s, v=v)


def _resolve_coefficients(coefficients: Coefficients):
    if isinstance(coefficients, str):
        table = {"schedule": NS_SCHEDULE, "fixed": NS_FIXED}
        if coefficients not in table:
            raise ValueError(f"unknown Newton-Schulz coefficient set {coefficients!r}")
        return table[coefficients]
    coefficients = tuple(tuple(map(float, c)) for c in coefficients)
    if not coefficients or any(len(c) != 3 for c in coefficients):
        raise ValueError("coefficients must be a non-empty sequence of (a, b, c)")
    return coefficients


def newton_schulz5(m, iterations: int = 5, coefficients: Coefficients = "schedule") -> np.ndarray:
    """Approximately orthogonalize ``m`` with a quintic Newton-Schulz iteration.

    The input is scaled by its Frobenius norm, so every singular value starts
    in (0, 1]; each step applies ``x -> a x + b x^3 + c x^5`` to the singular
    values while keeping the singular vectors. A zero input maps to zero.

    ``coefficients`` is either a named set (``"schedule"`` or ``"fixed"``) or
    explicit ``(a, b, c)`` tuples, one per iteration, the last one repeating.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    coefs = _resolve_coefficients(coefficients)
    x = as_matrix(m, "m")
    check_finite(x, "m")
    transposed = x.shape[0] > x.shape[1]
    if transposed:
        x = x.T
    x = x / (np.linalg.norm(x) + NS_EPS)
    for k in range(iterations):
        a, b, c = coefs[min(k, len(coefs) - 1)]
        gram = x @ x.T
        x = a * x + (b * gram + c * (gram @ gram)) @ x
    return x.T if transposed else x
