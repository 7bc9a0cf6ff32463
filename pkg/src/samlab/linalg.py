"""Dense linear algebra kernels and seeded randomness.

Matrices are plain 2-D float64 numpy arrays in row-major order; this module
is the only place numeric primitives are defined, everything else builds on
it. Determinism is the ruling concern: ``matmul`` fixes the reduction order
(for each output element the products are accumulated in increasing order of
the shared index, exactly like the textbook triple loop), singular values
come from a one-sided Jacobi sweep, and random draws come from a
counter-based SplitMix64 generator so that a seed pins the full stream on
any platform.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

# Matrices are bare numpy arrays; the alias only serves signatures.
Matrix = np.ndarray


def mat(rows) -> Matrix:
    """Build a matrix from nested sequences, validating shape and finiteness."""
    out = np.array(rows, dtype=np.float64, order="C")
    if out.ndim != 2 or out.size == 0:
        raise ShapeError(f"expected a nonempty 2-D matrix, got shape {out.shape}")
    if not np.isfinite(out).all():
        raise ShapeError("matrix entries must all be finite")
    return out


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=np.float64)


def eye(n: int) -> Matrix:
    return np.eye(n, dtype=np.float64)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a fixed, documented accumulation order.

    Each output element is the sum of products over the shared dimension,
    accumulated sequentially in increasing index order (row-major traversal,
    inner loop over the shared dimension). The result is bit-identical to a
    scalar triple-loop recomputation, which BLAS-backed products are not.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.shape[1] == 1:
        # Single-column outputs would dispatch to a dot kernel whose SIMD
        # partial sums reorder the reduction; keep the documented order.
        out = np.zeros((a.shape[0], 1), dtype=np.float64)
        for k in range(a.shape[1]):
            out += a[:, k, None] * b[k]
        return out
    # einsum without optimization accumulates each element sequentially over
    # the shared index, matching the triple loop bit for bit.
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax with per-row max subtraction for stability."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"softmax_rows expects a nonempty 2-D matrix, got {m.shape}")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def frobenius_norm(m: Matrix) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt((m * m).sum()))


def spectral_norm(m: Matrix, max_iters: int = 200, tol: float = 1e-10) -> float:
    """Largest singular value via power iteration on M^T M.

    The start vector comes from a fixed seed-0 stream; convergence is
    declared when successive Rayleigh estimates differ by less than ``tol``
    relatively. Only the converged value is contractual; the internal
    matrix-vector products may use any accumulation order.
    """
    if max_iters < 1 or tol <= 0:
        raise ShapeError("spectral_norm requires max_iters >= 1 and tol > 0")
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"spectral_norm expects a 2-D matrix, got {m.shape}")
    if not m.any():
        return 0.0
    v = rng_normal(Rng(0), m.shape[1], 1).ravel()
    v = v / np.sqrt((v * v).sum())
    est = 0.0
    for _ in range(max_iters):
        u = m @ v
        s2 = float(u @ u)  # = v^T M^T M v with ||v|| = 1
        w = m.T @ u
        nw = float(np.sqrt(w @ w))
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(np.sqrt(s2))
        if est > 0.0 and abs(new - est) <= tol * new:
            est = new
            break
        est = new
    return est


def jacobi_singular_values(m: Matrix, tol: float = 1e-14,
                           max_sweeps: int = 60) -> np.ndarray:
    """All singular values by one-sided Jacobi, sorted descending.

    Column pairs are rotated until every pair is orthogonal to relative
    tolerance ``tol``; the singular values are then the column norms. Exact
    enough for the small dense matrices this package manipulates.
    """
    a = np.array(m, dtype=np.float64, order="C")
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {a.shape}")
    if a.shape[0] < a.shape[1]:
        a = np.array(a.T, order="C")
    n = a.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                cp = a[:, p]
                cq = a[:, q]
                apq = float(cp @ cq)
                app = float(cp @ cp)
                aqq = float(cq @ cq)
                if app * aqq == 0.0 or abs(apq) <= tol * np.sqrt(app * aqq):
                    continue
                rotated = True
                tau = (aqq - app) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                if tau == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * cp - s * cq
                new_q = s * cp + c * cq
                a[:, p] = new_p
                a[:, q] = new_q
        if not rotated:
            break
    svals = np.sqrt((a * a).sum(axis=0))
    svals.sort()
    return svals[::-1].copy()


def nuclear_norm(m: Matrix) -> float:
    """Sum of singular values (one-sided Jacobi)."""
    return float(jacobi_singular_values(m).sum())


def matrix_rank(m: Matrix, tol: float = 1e-10) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    if tol <= 0:
        raise ShapeError("matrix_rank requires tol > 0")
    svals = jacobi_singular_values(m)
    if svals.size == 0 or svals[0] == 0.0:
        return 0
    return int((svals > tol * svals[0]).sum())


_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class Rng:
    """Counter-based SplitMix64 stream with a fixed, documented draw order.

    The i-th raw 64-bit output is ``mix(seed + i * golden)``; draws are
    therefore identical whether generated one at a time or as a vectorized
    block, and identical across platforms. Normals use the Box-Muller
    transform on consecutive uniform pairs (the spare of an odd request is
    discarded); uniforms take the top 53 bits of a raw draw.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._count = 0

    def _raw(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
            z = np.uint64(self.seed) + idx * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        self._count += n
        return z

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1)."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normals(self, n: int) -> np.ndarray:
        """n standard normal doubles (Box-Muller on uniform pairs)."""
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        u1 = 1.0 - u[0::2]  # in (0, 1] so the log is finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integer_below(self, bound: int) -> int:
        """One integer in [0, bound); bias of the modulo map is ~bound/2^64."""
        if bound <= 0:
            raise ShapeError("integer_below requires a positive bound")
        return int(self._raw(1)[0] % np.uint64(bound))

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n), one raw draw per swap."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        raws = self._raw(n - 1)
        for t, i in enumerate(range(n - 1, 0, -1)):
            j = int(raws[t] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def rng_normal(rng: Rng, rows: int, cols: int) -> Matrix:
    """rows x cols matrix of i.i.d. standard normals, filled row-major."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"rng_normal requires positive dims, got {rows}x{cols}")
    return rng.normals(rows * cols).reshape(rows, cols)


def glorot_init(rng: Rng, rows: int, cols: int) -> Matrix:
    """Glorot-uniform matrix: entries uniform on [-a, a], a = sqrt(6/(rows+cols))."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"glorot_init requires positive dims, got {rows}x{cols}")
    a = np.sqrt(6.0 / (rows + cols))
    u = rng.uniforms(rows * cols).reshape(rows, cols)
    return (2.0 * u - 1.0) * a
