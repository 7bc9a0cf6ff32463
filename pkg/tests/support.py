"""Shared test oracles: scalar reimplementations and finite differences.

Everything here is deliberately independent of the package's vectorized
code paths: plain Python loops, math functions, and list arithmetic.
"""

import math

import numpy as np

from samlab.linalg import spectral_norm
from samlab.model import (
    AttentionVariant,
    ModelDims,
    ModelOptions,
    WEIGHT_NAMES,
    forward,
    vector_to_params,
)
from samlab.optim import mse_loss_and_grad


def scalar_matmul(a, b):
    m, kk = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(kk):
                acc += a[i][k] * b[k][j]
            out[i][j] = acc
    return out


def scalar_forward_no_revin(x, w_q, w_k, w_v, w_o, w, d_model):
    """Step-by-step scalar recomputation of the channel-attention network."""
    x = [[float(v) for v in row] for row in np.asarray(x)]
    q = scalar_matmul(x, np.asarray(w_q).tolist())
    k = scalar_matmul(x, np.asarray(w_k).tolist())
    kt = [list(col) for col in zip(*k)]
    s = scalar_matmul(q, kt)
    root = math.sqrt(d_model)
    s = [[v / root for v in row] for row in s]
    a = []
    for row in s:
        mx = max(row)
        exps = [math.exp(v - mx) for v in row]
        tot = sum(exps)
        a.append([e / tot for e in exps])
    v1 = scalar_matmul(a, x)
    v2 = scalar_matmul(v1, np.asarray(w_v).tolist())
    v3 = scalar_matmul(v2, np.asarray(w_o).tolist())
    p = [[x[i][j] + v3[i][j] for j in range(len(x[0]))] for i in range(len(x))]
    y = scalar_matmul(p, np.asarray(w).tolist())
    return np.array(y)


def model_loss(vec, x, y, dims, options, frozen_sigma=None):
    """Training loss of one window as a function of the flat parameter vector.

    When sigma-reparam is active the spectral norms are frozen at the values
    passed in, matching the stop-gradient semantics of the analytic backward.
    """
    params = vector_to_params(vec, dims, options)
    out, _ = forward(x, params, dims, options, spectral_norms=frozen_sigma)
    loss, _ = mse_loss_and_grad(out, y, 1, dims.channels)
    return loss


def numerical_gradient(fn, vec, h=1e-6):
    """Central finite differences of a scalar function of a vector."""
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        up = vec.copy()
        up[i] += h
        dn = vec.copy()
        dn[i] -= h
        grad[i] = (fn(up) - fn(dn)) / (2.0 * h)
    return grad


def relative_errors(analytic, numeric, loss_scale=1.0, h=1e-6, rtol=1e-5):
    """Elementwise gradcheck relative errors against a noisy FD oracle.

    A central difference of two O(loss) evaluations carries cancellation
    noise of about eps * |loss| / (2h); entries at or below that resolution
    cannot be certified tighter, so the denominator is floored where the
    oracle's absolute noise would exceed rtol.
    """
    fd_noise = 10.0 * np.finfo(np.float64).eps * max(1.0, abs(loss_scale)) / (2.0 * h)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    denom = np.maximum(denom, fd_noise / rtol)
    return np.abs(analytic - numeric) / denom


def frozen_sigma_for(params):
    return {name: spectral_norm(getattr(params, name)) for name in WEIGHT_NAMES}


def random_tiny_setup(rng, seed_offset=0, sigma_reparam=False, revin=True,
                      variant=AttentionVariant.CHANNEL_WISE, max_l=8, max_h=4,
                      max_d=3, max_dm=4):
    """A random small model instance for gradient checks."""
    from samlab.linalg import Rng, rng_normal
    from samlab.model import init_params

    r = Rng(rng + seed_offset)
    length = 2 + r.integer_below(max_l - 1)
    horizon = 1 + r.integer_below(max_h)
    channels = 1 + r.integer_below(max_d)
    dm = 1 + r.integer_below(max_dm)
    dims = ModelDims(lookback=length, horizon=horizon, channels=channels, d_model=dm)
    options = ModelOptions(revin=revin, sigma_reparam=sigma_reparam, variant=variant)
    params = init_params(dims, r, options)
    # move RevIN affine away from the identity so its gradients are generic
    if revin:
        params.revin_beta = 0.1 * rng_normal(r, channels, 1).ravel()
        params.revin_gamma = 1.0 + 0.1 * rng_normal(r, channels, 1).ravel()
    if sigma_reparam:
        params.sigma_gammas = 1.0 + 0.1 * rng_normal(r, len(WEIGHT_NAMES), 1).ravel()
    x = rng_normal(r, channels, length)
    y = rng_normal(r, channels, horizon)
    return dims, options, params, x, y
