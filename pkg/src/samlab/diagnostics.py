"""Loss-landscape and attention diagnostics.

Sharpness is the top Hessian eigenvalue of the training loss, estimated by
power iteration on a finite-difference Hessian-vector operator; attention
health is measured by row entropy and nuclear norms. The least-squares
oracle gives the best linear predictor of the toy problem, which every
trained model's validation loss must sit above.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError, RankDeficiencyError, ShapeError
from .linalg import (
    Matrix,
    Rng,
    frobenius_norm,
    matmul,
    matrix_rank,
    nuclear_norm,
    rng_normal,
    spectral_norm,
)


@dataclass
class SharpnessReport:
    lambda_max: float
    iterations_used: int
    converged: bool


@dataclass
class AttentionStats:
    mean_entropy: float
    nuclear_norms: list


def hessian_vector_product(loss_grad_fn, omega: np.ndarray, v: np.ndarray,
                           h: float) -> np.ndarray:
    """H v by central differences of the gradient along v's direction.

    ``loss_grad_fn(params) -> (loss, grad)``. The step is taken along the
    normalized direction and the result rescaled by ||v||, so the operator
    is linear in v up to truncation error.
    """
    if h <= 0:
        raise ShapeError("h must be > 0")
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.sqrt(v @ v))
    if norm == 0.0:
        raise ShapeError("direction vector must be nonzero")
    unit = v / norm
    _, g_plus = loss_grad_fn(omega + h * unit)
    _, g_minus = loss_grad_fn(omega - h * unit)
    if not (np.isfinite(g_plus).all() and np.isfinite(g_minus).all()):
        raise NumericError("non-finite gradient inside Hessian-vector product")
    return (g_plus - g_minus) / (2.0 * h) * norm


def lambda_max(loss_grad_fn, omega: np.ndarray, max_iters: int = 100,
               tol: float = 1e-4, h: float | None = None) -> SharpnessReport:
    """Largest Hessian eigenvalue by power iteration on the HVP operator.

    The start direction comes from a fixed seed-0 stream; the Rayleigh
    quotient is reported and iteration stops on a relative change below
    ``tol``. Plain power iteration finds the dominant eigenvalue by
    magnitude; when that is negative (an indefinite Hessian away from a
    minimum) a second, shifted pass recovers the largest signed eigenvalue.
    ``iterations_used`` counts the decisive pass, bounded by ``max_iters``.
    """
    omega = np.asarray(omega, dtype=np.float64)
    if h is None:
        h = 1e-4 * (1.0 + float(np.sqrt(omega @ omega)))

    def power_pass(shift: float) -> tuple[float, int, bool]:
        v = rng_normal(Rng(0), omega.size, 1).ravel()
        v /= np.sqrt(v @ v)
        estimate = 0.0
        for it in range(1, max_iters + 1):
            hv = hessian_vector_product(loss_grad_fn, omega, v, h)
            if shift != 0.0:
                hv = hv + shift * v
            rayleigh = float(v @ hv)
            norm_hv = float(np.sqrt(hv @ hv))
            if norm_hv == 0.0:
                return 0.0, it, True
            v = hv / norm_hv
            if it > 1 and abs(rayleigh - estimate) <= tol * max(abs(rayleigh), 1e-30):
                return rayleigh, it, True
            estimate = rayleigh
        return estimate, max_iters, False

    dominant, its, converged = power_pass(0.0)
    if dominant >= 0.0:
        return SharpnessReport(lambda_max=dominant, iterations_used=its,
                               converged=converged)
    shift = 1.1 * abs(dominant)
    shifted, its2, converged2 = power_pass(shift)
    return SharpnessReport(lambda_max=shifted - shift, iterations_used=its2,
                           converged=converged and converged2)


def attention_entropy(a: Matrix) -> float:
    """Mean Shannon row entropy (nats) of a right-stochastic matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"attention matrix must be 2-D, got {a.shape}")
    row_sums = a.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6 or (a < 0).any():
        raise ContractError("rows must be probability vectors (sum to 1 within 1e-6)")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0.0, a * np.log(a), 0.0)
    return float(-terms.sum(axis=1).mean())


def _cholesky_solve(a: Matrix, b: Matrix) -> Matrix:
    """Solve A X = B for symmetric positive-definite A via Cholesky."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    lower = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - float(lower[j, :j] @ lower[j, :j])
        if d <= 0.0:
            raise RankDeficiencyError(
                f"Gram matrix is not positive definite at pivot {j}")
        lower[j, j] = np.sqrt(d)
        if j + 1 < n:
            lower[j + 1:, j] = (a[j + 1:, j] - lower[j + 1:, :j] @ lower[j, :j]) / lower[j, j]
    # forward then backward substitution, all right-hand sides at once
    y = np.zeros_like(b, dtype=np.float64)
    for i in range(n):
        y[i] = (b[i] - lower[i, :i] @ y[:i]) / lower[i, i]
    x = np.zeros_like(y)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - lower[i + 1:, i] @ x[i + 1:]) / lower[i, i]
    return x


def oracle_least_squares(xs: np.ndarray, ys: np.ndarray) -> tuple[Matrix, float]:
    """Least-squares mixing matrix for stacked (X, Y) pairs, plus its loss.

    Solves (sum X_i^T X_i) W = sum X_i^T Y_i with a Cholesky factorization
    and returns the training loss of W under the same 1/(N D) normalization
    the trainer uses.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 3 or ys.ndim != 3 or xs.shape[0] != ys.shape[0]:
        raise ShapeError(f"expected stacked pairs, got {xs.shape} and {ys.shape}")
    n, d, length = xs.shape
    gram = np.zeros((length, length))
    rhs = np.zeros((length, ys.shape[2]))
    for i in range(n):
        gram += matmul(xs[i].T, xs[i])
        rhs += matmul(xs[i].T, ys[i])
    w_opt = _cholesky_solve(gram, rhs)
    residual = 0.0
    for i in range(n):
        diff = ys[i] - matmul(xs[i], w_opt)
        residual += float((diff * diff).sum())
    return w_opt, residual / (n * d)


def rank_condition_check(p: Matrix, target: Matrix, tol: float = 1e-10) -> bool:
    """True iff stacking the target next to P leaves the rank unchanged,
    i.e. an exact linear read-out of the target from P exists."""
    p = np.asarray(p, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if p.shape[0] != target.shape[0]:
        raise ShapeError(f"row counts differ: {p.shape} vs {target.shape}")
    stacked = np.concatenate([p, target], axis=1)
    return matrix_rank(stacked, tol) == matrix_rank(p, tol)


def prop2_bound_check(x: Matrix, w_q: Matrix) -> tuple[float, float, bool]:
    """Nuclear-norm bound for symmetric score maps (W_K tied to W_Q).

    Returns (lhs, rhs, holds) for
    ||X Wq Wq^T X^T||_* <= ||Wq Wq^T||_2 ||X||_F^2.
    """
    x = np.asarray(x, dtype=np.float64)
    w_q = np.asarray(w_q, dtype=np.float64)
    if x.shape[1] != w_q.shape[0]:
        raise ShapeError(f"incompatible shapes: {x.shape} and {w_q.shape}")
    b = matmul(x, w_q)
    lhs = nuclear_norm(matmul(b, b.T))
    rhs = spectral_norm(matmul(w_q, w_q.T)) * frobenius_norm(x) ** 2
    return lhs, rhs, lhs <= rhs * (1.0 + 1e-9)
