"""Numerical kernels shared by the splitting solvers.

Everything here works on dense ``numpy`` arrays. Matrix-valued unknowns are
kept in matrix form; inner products are the Frobenius ones, so a matrix
unknown behaves exactly like its column-major vectorization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up inside an iterative kernel."""


@dataclass(frozen=True)
class BilinearMap:
    """The separable map ``Z -> left @ Z @ right``.

    With column-major vectorization this is the Kronecker operator
    ``kron(right.T, left)`` acting on ``vec(Z)``, but it is never formed.
    """

    left: np.ndarray
    right: np.ndarray

    @property
    def coef_shape(self) -> tuple[int, int]:
        return self.left.shape[1], self.right.shape[0]

    @property
    def out_shape(self) -> tuple[int, int]:
        return self.left.shape[0], self.right.shape[1]

    def forward(self, Z: np.ndarray) -> np.ndarray:
        if Z.shape != self.coef_shape:
            raise ValueError(
                f"coefficient shape {Z.shape} does not match operator {self.coef_shape}"
            )
        return self.left @ Z @ self.right

    def adjoint(self, W: np.ndarray) -> np.ndarray:
        if W.shape != self.out_shape:
            raise ValueError(f"data shape {W.shape} does not match operator {self.out_shape}")
        return self.left.T @ W @ self.right.T


@dataclass(frozen=True)
class LsqConfig:
    """Stopping rule for the inner conjugate-gradient solves."""

    tol: float = 1e-6
    max_iter: int = 100

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True)
class CgInfo:
    converged: bool
    iterations: int
    rel_residual: float


def soft_threshold(v, tau: float) -> np.ndarray:
    """Elementwise ``sign(v) * max(|v| - tau, 0)``.

    This is the proximal map of ``tau * |.|``, i.e. the minimizer of
    ``tau * |p| + 0.5 * (p - v) ** 2``.
    """
    if tau < 0:
        raise ValueError(f"threshold must be nonnegative, got {tau}")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def ridge_shrink(a, lam: float, mu: float) -> np.ndarray:
    """Minimizer of ``lam * ||R||^2 + mu * ||R - a||^2``, namely ``mu / (lam + mu) * a``."""
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return (mu / (lam + mu)) * np.asarray(a, dtype=float)


def cg_solve(
    apply_A: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    cfg: LsqConfig = LsqConfig(),
    x0: np.ndarray | None = None,
    callback: Callable[[np.ndarray], None] | None = None,
) -> tuple[np.ndarray, CgInfo]:
    """Conjugate gradients for a symmetric positive (semi)definite ``A``.

    Parameters
    ----------
    apply_A : callable
        Maps an array shaped like ``b`` to ``A @ b`` (same shape).
    b : ndarray
        Right-hand side; any shape, treated as a flat vector.
    cfg : LsqConfig
        Relative residual tolerance and iteration cap.
    x0 : ndarray, optional
        Warm start. Defaults to zeros.
    callback : callable, optional
        Called with each new iterate.

    Returns
    -------
    x : ndarray
        The converged iterate, or the iterate with the smallest residual seen
        when the cap is hit.
    info : CgInfo
        Convergence flag, iterations used and final relative residual.
    """
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise NonFiniteError("cg_solve: right-hand side is not finite")
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), CgInfo(True, 0, 0.0)

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - apply_A(x) if x0 is not None else b.copy()
    rr = float(np.vdot(r, r))
    rel = np.sqrt(rr) / bnorm
    if rel <= cfg.tol:
        return x, CgInfo(True, 0, rel)

    best_x, best_rel = x.copy(), rel
    p = r.copy()
    for it in range(1, cfg.max_iter + 1):
        Ap = apply_A(p)
        pAp = float(np.vdot(p, Ap))
        if not np.isfinite(pAp):
            raise NonFiniteError(f"cg_solve: non-finite curvature at iteration {it}")
        if pAp <= 0.0:
            # semidefinite direction: nothing left to reduce along p
            break
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = float(np.vdot(r, r))
        if not np.isfinite(rr_new):
            raise NonFiniteError(f"cg_solve: non-finite residual at iteration {it}")
        if callback is not None:
            callback(x)
        rel = np.sqrt(rr_new) / bnorm
        if rel < best_rel:
            best_x, best_rel = x, rel
        if rel <= cfg.tol:
            return x, CgInfo(True, it, rel)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return best_x, CgInfo(False, it, best_rel)


def _check(name: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{name}: non-finite values in solution")
    return value


def solve_Z(Y, D1, D2, P, B1, Q, B2, mu, mu1, cfg=LsqConfig(), Z0=None):
    """Coefficient update: minimize over ``Z``

    ``mu * ||P - (Y - D1 Z D2) - B1||^2 + mu1 * ||Q - Z - B2||^2``.

    The normal equations ``mu * D1'D1 Z D2 D2' + mu1 * Z = rhs`` are solved
    by CG directly on the matrix unknown.
    """
    if mu == 0:
        return Q - B2
    G1 = D1.T @ D1
    G2 = D2 @ D2.T
    rhs = mu * (D1.T @ (Y + B1 - P) @ D2.T) + mu1 * (Q - B2)

    def apply_A(Z):
        return mu * (G1 @ Z @ G2) + mu1 * Z

    Z, _ = cg_solve(apply_A, rhs, cfg, x0=Z0)
    return _check("solve_Z", Z)


def _spd_solve(A, B):
    return linalg.solve(A, B, assume_a="pos")


def solve_D1(Y, Z, D2, P, B1, R, B3, mu, mu2):
    """Spatial dictionary update: minimize over ``D1``

    ``mu * ||P - (Y - D1 Z D2) - B1||^2 + mu2 * ||R - D1 - B3||^2``.

    Every row of ``D1`` solves the same system ``D1 (mu M M' + mu2 I) = rhs``
    with ``M = Z D2``. ``M M'`` has rank at most ``bands``, so when that is
    smaller than ``k1`` the Woodbury identity reduces the solve to a
    ``bands x bands`` system.
    """
    if mu == 0:
        return R - B3
    M = Z @ D2
    rhs = mu * ((Y + B1 - P) @ M.T) + mu2 * (R - B3)
    k1, b = M.shape
    if k1 <= b:
        D1 = _spd_solve(mu * (M @ M.T) + mu2 * np.eye(k1), rhs.T).T
    else:
        C = M.T @ M + (mu2 / mu) * np.eye(b)
        D1 = (rhs - (rhs @ M) @ _spd_solve(C, M.T)) / mu2
    return _check("solve_D1", D1)


def solve_D2(Y, Z, D1, P, B1, S, B4, mu, mu3):
    """Spectral dictionary update: minimize over ``D2``

    ``mu * ||P - (Y - D1 Z D2) - B1||^2 + mu3 * ||S - D2 - B4||^2``.

    The normal equations ``(mu M'M + mu3 I) D2 = rhs`` with ``M = D1 Z`` are
    only ``k2 x k2`` and are solved directly.
    """
    if mu == 0:
        return S - B4
    M = D1 @ Z
    A = mu * (M.T @ M) + mu3 * np.eye(M.shape[1])
    rhs = mu * (M.T @ (Y + B1 - P)) + mu3 * (S - B4)
    return _check("solve_D2", _spd_solve(A, rhs))
