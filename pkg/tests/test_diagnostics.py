import numpy as np
import pytest
from support import numerical_gradient

from samlab.diagnostics import (
    attention_entropy,
    hessian_vector_product,
    lambda_max,
    oracle_least_squares,
    prop2_bound_check,
    rank_condition_check,
)
from samlab.errors import ContractError, RankDeficiencyError, ShapeError
from samlab.linalg import Rng, eye, matmul, rng_normal, softmax_rows
from samlab.model import (
    ModelDims,
    ModelOptions,
    backward,
    forward,
    gradients_to_vector,
    init_params,
    params_to_vector,
    vector_to_params,
)
from samlab.optim import mse_loss_and_grad


def quadratic_closure(a):
    """loss = 0.5 w^T A w for symmetric A: gradient A w, Hessian A."""

    def fn(w):
        return 0.5 * float(w @ (a @ w)), a @ w

    return fn


def tiny_model_closure(seed=0, lookback=4, horizon=2, channels=2, d_model=1):
    """A transformer loss over a handful of samples, as a flat-vector closure."""
    dims = ModelDims(lookback, horizon, channels, d_model)
    options = ModelOptions(revin=False)
    rng = Rng(seed)
    params = init_params(dims, rng, options)
    xs = np.stack([rng_normal(rng, channels, lookback) for _ in range(4)])
    ys = np.stack([rng_normal(rng, channels, horizon) for _ in range(4)])

    def fn(vec):
        p = vector_to_params(vec, dims, options)
        out, cache = forward(xs, p, dims, options)
        loss, dy = mse_loss_and_grad(out, ys, xs.shape[0], channels)
        grads = backward(cache, dy, p, options)
        return loss, gradients_to_vector(grads)

    return fn, params_to_vector(params)


class TestHvp:
    def test_quadratic_exact(self):
        rng = Rng(1)
        b = rng_normal(rng, 5, 5)
        a = (b + b.T) / 2.0
        fn = quadratic_closure(a)
        v = rng_normal(rng, 5, 1).ravel()
        hv = hessian_vector_product(fn, np.zeros(5), v, 1e-4)
        assert np.abs(hv - a @ v).max() < 1e-8

    def test_linearity_in_v(self):
        rng = Rng(2)
        b = rng_normal(rng, 4, 4)
        a = (b + b.T) / 2.0
        fn = quadratic_closure(a)
        omega = rng_normal(rng, 4, 1).ravel()
        v = rng_normal(rng, 4, 1).ravel()
        hv = hessian_vector_product(fn, omega, v, 1e-4)
        hv3 = hessian_vector_product(fn, omega, 3.0 * v, 1e-4)
        assert np.abs(hv3 - 3.0 * hv).max() < 1e-8 * max(1.0, np.abs(hv3).max())

    def test_zero_direction_rejected(self):
        fn = quadratic_closure(eye(3))
        with pytest.raises(ShapeError):
            hessian_vector_product(fn, np.zeros(3), np.zeros(3), 1e-4)

    def test_matches_dense_hessian_on_tiny_model(self):
        fn, omega = tiny_model_closure()
        assert omega.size <= 30
        # dense Hessian built by finite differences of finite differences
        dense = np.zeros((omega.size, omega.size))
        h = 1e-5
        loss_only = lambda w: fn(w)[0]
        for j in range(omega.size):
            up = omega.copy()
            up[j] += h
            dn = omega.copy()
            dn[j] -= h
            dense[:, j] = (numerical_gradient(loss_only, up, h=1e-4)
                           - numerical_gradient(loss_only, dn, h=1e-4)) / (2 * h)
        dense = (dense + dense.T) / 2.0
        rng = Rng(3)
        v = rng_normal(rng, omega.size, 1).ravel()
        hv = hessian_vector_product(fn, omega, v, 1e-5)
        ref = dense @ v
        rel = np.abs(hv - ref).max() / max(np.abs(ref).max(), 1e-12)
        assert rel < 1e-4


class TestLambdaMax:
    def test_known_eigenvalue(self):
        fn = quadratic_closure(np.diag([3.0, 1.0]))
        report = lambda_max(fn, np.zeros(2), tol=1e-9)
        assert report.converged
        assert report.lambda_max == pytest.approx(3.0, abs=1e-6)

    def test_scaling_property(self):
        rng = Rng(4)
        b = rng_normal(rng, 6, 6)
        a = matmul(b, b.T)  # PSD so the top eigenvalue dominates cleanly
        r1 = lambda_max(quadratic_closure(a), np.zeros(6))
        r5 = lambda_max(quadratic_closure(5.0 * a), np.zeros(6))
        assert r5.lambda_max == pytest.approx(5.0 * r1.lambda_max, rel=1e-4)

    def test_zero_hessian(self):
        fn = quadratic_closure(np.zeros((3, 3)))
        report = lambda_max(fn, np.ones(3))
        assert report.converged and report.lambda_max == 0.0

    def test_indefinite_hessian_reports_largest_signed(self):
        # dominant magnitude is negative; the estimator must still report
        # the largest (signed) eigenvalue
        fn = quadratic_closure(np.diag([1.0, -3.0]))
        report = lambda_max(fn, np.zeros(2), tol=1e-9)
        assert report.lambda_max == pytest.approx(1.0, rel=1e-4)

    def test_negative_definite_hessian(self):
        fn = quadratic_closure(np.diag([-1.0, -4.0]))
        report = lambda_max(fn, np.zeros(2), tol=1e-9)
        assert report.lambda_max == pytest.approx(-1.0, rel=1e-4)

    def test_tiny_transformer_vs_dense_eigenvalue(self):
        fn, omega = tiny_model_closure(seed=5)
        assert omega.size <= 30
        # independent oracle: dense Hessian from analytic gradients + eigh
        n = omega.size
        dense = np.zeros((n, n))
        h = 1e-5
        for j in range(n):
            up = omega.copy()
            up[j] += h
            dn = omega.copy()
            dn[j] -= h
            dense[:, j] = (fn(up)[1] - fn(dn)[1]) / (2 * h)
        dense = (dense + dense.T) / 2.0
        top = float(np.linalg.eigvalsh(dense)[-1])
        report = lambda_max(fn, omega, max_iters=500, tol=1e-7)
        assert report.lambda_max == pytest.approx(top, rel=1e-3)

    def test_invariant_under_parameter_permutation(self):
        fn, omega = tiny_model_closure(seed=6)
        perm = Rng(7).permutation(omega.size)
        inv = np.argsort(perm)

        def permuted_fn(w):
            loss, grad = fn(w[inv])
            return loss, grad[perm]  # chain rule for the relabeling

        base = lambda_max(fn, omega, max_iters=300, tol=1e-6).lambda_max
        permd = lambda_max(permuted_fn, omega[perm], max_iters=300, tol=1e-6).lambda_max
        assert permd == pytest.approx(base, rel=1e-6)


class TestAttentionEntropy:
    def test_uniform_is_log_d(self):
        d = 6
        a = np.full((d, d), 1.0 / d)
        assert attention_entropy(a) == pytest.approx(np.log(d), abs=1e-12)

    def test_identity_is_zero(self):
        assert attention_entropy(eye(5)) == 0.0

    def test_random_stochastic_matches_direct_sum(self):
        a = softmax_rows(rng_normal(Rng(8), 6, 6))
        direct = 0.0
        for row in a:
            direct += -sum(float(p) * np.log(float(p)) for p in row if p > 0)
        direct /= a.shape[0]
        assert attention_entropy(a) == pytest.approx(direct, abs=1e-12)

    def test_entropy_bounds_property(self):
        rng = Rng(9)
        for _ in range(20):
            d = 2 + rng.integer_below(6)
            a = softmax_rows(rng_normal(rng, d, d) * 3.0)
            e = attention_entropy(a)
            assert -1e-12 <= e <= np.log(d) + 1e-12

    def test_non_stochastic_rejected(self):
        with pytest.raises(ContractError):
            attention_entropy(np.full((3, 3), 0.5))


def gaussian_elimination_solve(a, b):
    """Independent oracle: partial-pivot Gaussian elimination."""
    a = [[float(v) for v in row] for row in np.asarray(a)]
    b = [[float(v) for v in row] for row in np.asarray(b)]
    n = len(a)
    m = len(b[0])
    for col in range(n):
        pivot = max(range(col, n), key=lambda r: abs(a[r][col]))
        a[col], a[pivot] = a[pivot], a[col]
        b[col], b[pivot] = b[pivot], b[col]
        for r in range(col + 1, n):
            f = a[r][col] / a[col][col]
            for c in range(col, n):
                a[r][c] -= f * a[col][c]
            for c in range(m):
                b[r][c] -= f * b[col][c]
    x = [[0.0] * m for _ in range(n)]
    for r in range(n - 1, -1, -1):
        for c in range(m):
            acc = b[r][c] - sum(a[r][k] * x[k][c] for k in range(r + 1, n))
            x[r][c] = acc / a[r][r]
    return np.array(x)


class TestOracle:
    def test_noise_free_recovery(self):
        from samlab.data import ToySpec, generate_toy

        toy = generate_toy(ToySpec(lookback=6, horizon=2, channels=3, n_train=50,
                                   n_val=5, noise_scale=0.0, seed=10))
        w_hat, mse = oracle_least_squares(toy.train.xs, toy.train.ys)
        assert np.abs(w_hat - toy.w_toy).max() < 1e-6
        assert mse < 1e-14

    def test_single_square_sample_interpolates(self):
        # D = L: X is square and invertible a.s., so the fit is exact and
        # the training residual vanishes (the only D >= L case where the
        # SPD Gram precondition and exact interpolation coexist).
        rng = Rng(11)
        x = rng_normal(rng, 4, 4)
        y = rng_normal(rng, 4, 2)
        w_hat, mse = oracle_least_squares(x[None], y[None])
        assert np.abs(matmul(x, w_hat) - y).max() < 1e-8
        assert mse < 1e-16

    def test_matches_gaussian_elimination_oracle(self):
        rng = Rng(12)
        xs = np.stack([rng_normal(rng, 3, 6) for _ in range(50)])
        ys = np.stack([rng_normal(rng, 3, 2) for _ in range(50)])
        w_hat, _ = oracle_least_squares(xs, ys)
        gram = sum(matmul(xs[i].T, xs[i]) for i in range(50))
        rhs = sum(matmul(xs[i].T, ys[i]) for i in range(50))
        ref = gaussian_elimination_solve(gram, rhs)
        assert np.abs(w_hat - ref).max() < 1e-8
        assert np.abs(w_hat - np.linalg.solve(gram, rhs)).max() < 1e-8

    def test_singular_gram_rejected(self):
        xs = np.zeros((3, 2, 4))
        ys = np.zeros((3, 2, 2))
        with pytest.raises(RankDeficiencyError):
            oracle_least_squares(xs, ys)


class TestRankCondition:
    def test_full_rank_p_with_small_d(self):
        rng = Rng(13)
        for _ in range(20):
            p = rng_normal(rng, 3, 12)  # full row rank a.s.
            target = rng_normal(rng, 3, 5)
            assert rank_condition_check(p, target)

    def test_zero_p_nonzero_target(self):
        assert not rank_condition_check(np.zeros((3, 8)), rng_normal(Rng(14), 3, 4))

    def test_target_inside_row_space(self):
        rng = Rng(15)
        p = np.outer(rng_normal(rng, 3, 1).ravel(), rng_normal(rng, 8, 1).ravel())
        m = rng_normal(rng, 8, 4)
        assert rank_condition_check(p, matmul(p, m))
        # and a target outside the rank-1 row space fails
        assert not rank_condition_check(p, rng_normal(rng, 3, 4))


class TestProp2Bound:
    def test_zero_input(self):
        lhs, rhs, holds = prop2_bound_check(np.zeros((3, 6)), rng_normal(Rng(16), 6, 2))
        assert lhs == 0.0 and rhs == 0.0 and holds

    def test_orthogonal_rows_give_equality(self):
        rng = Rng(17)
        raw = rng_normal(rng, 5, 5)
        q, _ = np.linalg.qr(raw)  # orthogonal, so q q^T = I
        x = rng_normal(rng, 3, 5)
        lhs, rhs, holds = prop2_bound_check(x, q)
        assert holds
        assert lhs == pytest.approx(rhs, rel=1e-9)

    def test_holds_on_random_draws(self):
        rng = Rng(18)
        for _ in range(100):
            d = 2 + rng.integer_below(4)
            length = 3 + rng.integer_below(8)
            dm = 1 + rng.integer_below(5)
            x = rng_normal(rng, d, length)
            w_q = rng_normal(rng, length, dm)
            _, _, holds = prop2_bound_check(x, w_q)
            assert holds
