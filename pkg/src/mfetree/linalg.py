"""Small dense linear algebra: solves, pseudo-inverses, kernels and the resolvent expansion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import HigherOrderPole, InvalidParams, NotSingular, SingularMatrix

DEFAULT_TOL = 1e-10


def _as_square(a) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidParams(f"expected a square matrix, got shape {a.shape}")
    return a


def solve_dense(a, b, tol: float = 1e-14) -> np.ndarray:
    """Solve a x = b by LU with partial pivoting.

    Raises SingularMatrix when a pivot is below ``tol`` times the largest
    absolute entry of ``a``.
    """
    a = _as_square(a)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != a.shape[0]:
        raise InvalidParams(f"right-hand side has {b.shape[0]} rows, matrix has {a.shape[0]}")
    scale = np.abs(a).max() if a.size else 0.0
    if scale == 0.0:
        raise SingularMatrix("zero matrix")
    lu = a.copy()
    x = b.astype(float).copy()
    m = lu.shape[0]
    for k in range(m):
        piv = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[piv, k]) <= tol * scale:
            raise SingularMatrix(f"pivot {k} is {lu[piv, k]!r}, below {tol:g} relative threshold")
        if piv != k:
            lu[[k, piv]] = lu[[piv, k]]
            x[[k, piv]] = x[[piv, k]]
        factors = lu[k + 1:, k] / lu[k, k]
        lu[k + 1:, k:] -= np.outer(factors, lu[k, k:])
        x[k + 1:] -= np.multiply.outer(factors, x[k])
    for k in range(m - 1, -1, -1):
        x[k] = (x[k] - lu[k, k + 1:] @ x[k + 1:]) / lu[k, k]
    return x


def inverse(a) -> np.ndarray:
    a = _as_square(a)
    return solve_dense(a, np.eye(a.shape[0]))


def _sign_fix(vec: np.ndarray) -> np.ndarray:
    # largest-magnitude component positive; ties resolved by the first index
    i = int(np.argmax(np.abs(vec)))
    return -vec if vec[i] < 0 else vec


def pseudo_inverse(a, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Moore-Penrose inverse; singular values below tol*sigma_max are dropped.

    Raises SingularMatrix when the result is not representable in floating point.
    """
    if tol <= 0:
        raise InvalidParams("tol must be positive")
    a = _as_square(a)
    uu, s, vt = np.linalg.svd(a)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros_like(a.T)
    keep = s > tol * s[0]
    with np.errstate(over="ignore", invalid="ignore"):
        out = (vt[keep].T / s[keep]) @ uu[:, keep].T
    if not np.all(np.isfinite(out)):
        raise SingularMatrix(f"pseudo-inverse overflows (smallest kept singular value {s[keep][-1]!r})")
    return out


@dataclass(frozen=True)
class KernelAnalysis:
    singular_values: np.ndarray
    kernel_dim: int
    left: np.ndarray | None   # v with v^T A = 0
    right: np.ndarray | None  # kappa with A kappa = 0
    pinv: np.ndarray


def analyze_kernel(a, tol: float = DEFAULT_TOL, reference: float | None = None) -> KernelAnalysis:
    """Numerical kernel of a square matrix.

    Singular values at or below ``tol * reference`` count as zero. The default
    reference is max(sigma_max, 1) so that an exactly zero matrix, or one whose
    only entries are rounding noise, is recognised as rank deficient.
    """
    a = _as_square(a)
    uu, s, vt = np.linalg.svd(a)
    if reference is None:
        reference = max(float(s[0]) if s.size else 0.0, 1.0)
    thresh = tol * reference
    zero = s <= thresh
    dim = int(zero.sum())
    keep = ~zero
    pinv = (vt[keep].T / s[keep]) @ uu[:, keep].T if keep.any() else np.zeros_like(a.T)
    left = right = None
    if dim == 1:
        left = _sign_fix(uu[:, -1].copy())
        right = _sign_fix(vt[-1].copy())
    return KernelAnalysis(s, dim, left, right, pinv)


@dataclass(frozen=True)
class LaurentExpansion:
    r_minus1: np.ndarray
    regular_terms: tuple
    order: int
    projection: np.ndarray
    pinv: np.ndarray

    def evaluate(self, eps: float) -> np.ndarray:
        """Truncated series for (I - Theta + eps I)^-1."""
        out = self.r_minus1 / eps
        for n, r in enumerate(self.regular_terms):
            out = out + eps ** n * r
        return out


def laurent_expand(theta, order: int, tol: float = DEFAULT_TOL) -> LaurentExpansion:
    """Expansion of (I - Theta + eps I)^-1 around eps = 0 for a rank-one kernel."""
    theta = _as_square(theta)
    if order < 0:
        raise InvalidParams("order must be non-negative")
    m = theta.shape[0]
    ka = analyze_kernel(np.eye(m) - theta, tol)
    if ka.kernel_dim == 0:
        raise NotSingular("I - Theta is invertible")
    if ka.kernel_dim > 1:
        raise HigherOrderPole(f"kernel dimension {ka.kernel_dim}; only rank-one kernels are expanded")
    v, kappa = ka.left, ka.right
    vk = float(v @ kappa)
    if abs(vk) <= tol:
        raise HigherOrderPole(f"(v, kappa) = {vk:.3g}: pole of order two or more")
    r_minus1 = np.outer(kappa, v) / vk
    proj = np.eye(m) - r_minus1
    pg = proj @ ka.pinv
    terms = []
    power = pg.copy()
    for n in range(order + 1):
        terms.append((-1) ** n * power @ proj)
        power = power @ pg
    return LaurentExpansion(r_minus1, tuple(terms), order, proj, ka.pinv)


def laurent_eval_error(theta, eps: float, order: int, tol: float = DEFAULT_TOL) -> float:
    """Spectral-norm gap between the direct inverse of I - Theta + eps I and the truncated series."""
    if eps == 0:
        raise InvalidParams("eps must be non-zero")
    theta = _as_square(theta)
    exp = laurent_expand(theta, order, tol)
    pg_norm = np.linalg.norm(exp.projection @ exp.pinv, 2)
    if pg_norm > 0 and abs(eps) >= 1.0 / pg_norm:
        raise InvalidParams(f"|eps| must be below 1/||PG|| = {1.0 / pg_norm:.6g}")
    m = theta.shape[0]
    direct = inverse(np.eye(m) - theta + eps * np.eye(m))
    return float(np.linalg.norm(direct - exp.evaluate(eps), 2))
