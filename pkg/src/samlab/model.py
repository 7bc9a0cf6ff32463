"""The shallow channel-attention forecaster and its hand-written backward.

One encoder block, one head, no feed-forward, no biases: the network maps a
D x L window to [X + A(X) X Wv Wo] W with A the row-stochastic channel
attention, optionally wrapped in reversible instance normalization and with
spectrally reparameterized weights. Forward and backward operate on stacked
batches (B x D x L); a plain D x L input is treated as a batch of one, and
row-independent products go through ``linalg.matmul`` on the stacked rows so
per-sample and batched evaluation agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateScaleError, ShapeError
from .linalg import Matrix, Rng, glorot_init, matmul, softmax_rows, spectral_norm

WEIGHT_NAMES = ("w_q", "w_k", "w_v", "w_o", "w")


class AttentionVariant(Enum):
    CHANNEL_WISE = "channel"
    IDENTITY = "identity"
    TEMPORAL = "temporal"


@dataclass(frozen=True)
class ModelDims:
    lookback: int
    horizon: int
    channels: int
    d_model: int = 16

    def __post_init__(self):
        for name in ("lookback", "horizon", "channels", "d_model"):
            if getattr(self, name) < 1:
                raise ShapeError(f"ModelDims.{name} must be >= 1")


@dataclass(frozen=True)
class ModelOptions:
    revin: bool = True
    sigma_reparam: bool = False
    variant: AttentionVariant = AttentionVariant.CHANNEL_WISE
    revin_eps: float = 1e-5

    def __post_init__(self):
        if self.revin_eps <= 0:
            raise ShapeError("revin_eps must be > 0")


@dataclass
class RevinStats:
    mu: np.ndarray
    var: np.ndarray
    epsilon: float


@dataclass
class ModelParams:
    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    w: Matrix
    revin_beta: np.ndarray
    revin_gamma: np.ndarray
    sigma_gammas: np.ndarray | None = None  # one scalar per weight, Q K V O W

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.w_q.copy(), self.w_k.copy(), self.w_v.copy(), self.w_o.copy(),
            self.w.copy(), self.revin_beta.copy(), self.revin_gamma.copy(),
            None if self.sigma_gammas is None else self.sigma_gammas.copy())


@dataclass
class Gradients:
    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    w: Matrix
    revin_beta: np.ndarray
    revin_gamma: np.ndarray
    sigma_gammas: np.ndarray | None = None


@dataclass
class ForwardCache:
    """Every intermediate of one (batched) forward pass the backward needs."""

    x: np.ndarray            # (B, D, L)
    x_norm: np.ndarray       # (B, D, L), equals x when RevIN is off
    x_hat: np.ndarray | None  # (x - mu) / sqrt(var + eps)
    mu: np.ndarray | None     # (B, D)
    var: np.ndarray | None
    denom: np.ndarray | None  # sqrt(var + eps)
    epsilon: float
    q: np.ndarray | None
    k: np.ndarray | None
    scores: np.ndarray | None
    attn: np.ndarray          # (B, D, D) or (B, L, L)
    v1: np.ndarray | None     # attention applied to its domain
    v2: np.ndarray | None     # v1 @ Wv
    value_out: np.ndarray     # (B, D, L)
    resid: np.ndarray         # (B, D, L), the P of the residual sum
    y_norm: np.ndarray        # (B, D, H)
    y: np.ndarray             # (B, D, H)
    eff: dict                 # effective weights actually multiplied
    sigma: dict | None        # spectral norms used by sigma-reparam
    single: bool              # input arrived as a single D x L matrix


def weight_shapes(dims: ModelDims, variant: AttentionVariant) -> dict:
    """Shapes of the five weight matrices for the given attention variant."""
    proj_rows = dims.channels if variant is AttentionVariant.TEMPORAL else dims.lookback
    return {
        "w_q": (proj_rows, dims.d_model),
        "w_k": (proj_rows, dims.d_model),
        "w_v": (proj_rows, dims.d_model),
        "w_o": (dims.d_model, proj_rows),
        "w": (dims.lookback, dims.horizon),
    }


def init_params(dims: ModelDims, rng: Rng, options: ModelOptions) -> ModelParams:
    """Glorot-initialized weights, RevIN at identity, reparam scales at one.

    Draw order is fixed (Q, K, V, O, W) so a seed pins the initialization.
    """
    shapes = weight_shapes(dims, options.variant)
    weights = {name: glorot_init(rng, *shapes[name]) for name in WEIGHT_NAMES}
    return ModelParams(
        w_q=weights["w_q"], w_k=weights["w_k"], w_v=weights["w_v"],
        w_o=weights["w_o"], w=weights["w"],
        revin_beta=np.zeros(dims.channels),
        revin_gamma=np.ones(dims.channels),
        sigma_gammas=np.ones(len(WEIGHT_NAMES)) if options.sigma_reparam else None,
    )


def param_slices(dims: ModelDims, options: ModelOptions) -> dict:
    """Slice of each tensor inside the flat parameter vector (fixed order)."""
    shapes = weight_shapes(dims, options.variant)
    sizes = [(name, shapes[name][0] * shapes[name][1]) for name in WEIGHT_NAMES]
    sizes.append(("revin_beta", dims.channels))
    sizes.append(("revin_gamma", dims.channels))
    if options.sigma_reparam:
        sizes.append(("sigma_gammas", len(WEIGHT_NAMES)))
    out = {}
    off = 0
    for name, size in sizes:
        out[name] = slice(off, off + size)
        off += size
    return out


def params_to_vector(params: ModelParams) -> np.ndarray:
    parts = [getattr(params, name).ravel() for name in WEIGHT_NAMES]
    parts.append(params.revin_beta)
    parts.append(params.revin_gamma)
    if params.sigma_gammas is not None:
        parts.append(params.sigma_gammas)
    return np.concatenate(parts)


def vector_to_params(vec: np.ndarray, dims: ModelDims,
                     options: ModelOptions) -> ModelParams:
    vec = np.asarray(vec, dtype=np.float64)
    slices = param_slices(dims, options)
    shapes = weight_shapes(dims, options.variant)
    expected = max(s.stop for s in slices.values())
    if vec.shape != (expected,):
        raise ShapeError(f"parameter vector has length {vec.shape}, expected ({expected},)")
    kwargs = {name: vec[slices[name]].reshape(shapes[name]).copy() for name in WEIGHT_NAMES}
    return ModelParams(
        **kwargs,
        revin_beta=vec[slices["revin_beta"]].copy(),
        revin_gamma=vec[slices["revin_gamma"]].copy(),
        sigma_gammas=vec[slices["sigma_gammas"]].copy() if options.sigma_reparam else None,
    )


def gradients_to_vector(grads: Gradients) -> np.ndarray:
    parts = [getattr(grads, name).ravel() for name in WEIGHT_NAMES]
    parts.append(grads.revin_beta)
    parts.append(grads.revin_gamma)
    if grads.sigma_gammas is not None:
        parts.append(grads.sigma_gammas)
    return np.concatenate(parts)


def revin_normalize(x: Matrix, beta: np.ndarray, gamma: np.ndarray,
                    epsilon: float) -> tuple[Matrix, RevinStats]:
    """Per-channel standardization with learnable affine (population variance)."""
    if epsilon <= 0:
        raise ShapeError("epsilon must be > 0")
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=1)
    centered = x - mu[:, None]
    var = (centered * centered).mean(axis=1)
    denom = np.sqrt(var + epsilon)
    xn = gamma[:, None] * (centered / denom[:, None]) + beta[:, None]
    return xn, RevinStats(mu=mu, var=var, epsilon=epsilon)


def revin_denormalize(y: Matrix, stats: RevinStats, beta: np.ndarray,
                      gamma: np.ndarray) -> Matrix:
    """Inverse of revin_normalize applied to the network output."""
    if np.any(gamma == 0.0):
        raise DegenerateScaleError("revin gamma has a zero entry; cannot denormalize")
    y = np.asarray(y, dtype=np.float64)
    denom = np.sqrt(stats.var + stats.epsilon)
    return denom[:, None] * (y - beta[:, None]) / gamma[:, None] + stats.mu[:, None]


def sigma_reparam_apply(w: Matrix, gamma_scalar: float, sn_iters: int = 200) -> Matrix:
    """Rescale a weight to spectral norm ``gamma_scalar``.

    The spectral-norm estimate is a constant with respect to differentiation:
    gradients flow through the matrix direction and the scalar only.
    """
    s = spectral_norm(w, max_iters=sn_iters)
    if s == 0.0:
        raise DegenerateScaleError("sigma reparam on a zero matrix")
    return (gamma_scalar / s) * np.asarray(w, dtype=np.float64)


def attention_scores(x_norm: Matrix, w_q: Matrix, w_k: Matrix, d_model: int) -> Matrix:
    """Pre-softmax channel scores X Wq Wk^T X^T / sqrt(d_model)."""
    q = matmul(x_norm, w_q)
    k = matmul(x_norm, w_k)
    return matmul(q, k.T) / np.sqrt(float(d_model))


def attention(x_norm: Matrix, params: ModelParams, variant: AttentionVariant) -> Matrix:
    """The attention matrix of one window under the selected variant."""
    x_norm = np.asarray(x_norm, dtype=np.float64)
    if variant is AttentionVariant.IDENTITY:
        return np.eye(x_norm.shape[0])
    if variant is AttentionVariant.TEMPORAL:
        scores = attention_scores(x_norm.T, params.w_q, params.w_k, params.w_q.shape[1])
        return softmax_rows(scores)
    scores = attention_scores(x_norm, params.w_q, params.w_k, params.w_q.shape[1])
    return softmax_rows(scores)


def linear_closed_form(x: Matrix, w: Matrix, beta: np.ndarray, gamma: np.ndarray,
                       epsilon: float) -> Matrix:
    """Closed form of normalize -> linear -> denormalize for a linear net.

    Equals X W plus a rank-one-per-channel correction built from the window
    statistics and the column sums of W; no attention path is involved.
    """
    if np.any(gamma == 0.0):
        raise DegenerateScaleError("gamma has a zero entry")
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=1)
    centered = x - mu[:, None]
    var = (centered * centered).mean(axis=1)
    denom = np.sqrt(var + epsilon)
    base = matmul(x, w)
    col_sums = w.sum(axis=0)
    xi = (mu - (beta / gamma) * denom)[:, None] * (1.0 - col_sums)[None, :]
    return base + xi


def _stack_mm(x3: np.ndarray, m: Matrix) -> np.ndarray:
    """Row-stacked matmul: (B, R, C) @ (C, N) -> (B, R, N), bit-equal per row."""
    b, r, c = x3.shape
    return matmul(x3.reshape(b * r, c), m).reshape(b, r, m.shape[1])


def effective_weights(params: ModelParams, options: ModelOptions,
                      spectral_norms: dict | None = None) -> tuple[dict, dict | None]:
    """The weights the forward pass multiplies with, plus the norms used.

    With sigma-reparam each matrix is scaled to spectral norm gamma_i; the
    norms may be supplied (e.g. frozen for finite-difference checks) or are
    estimated here from a seeded power iteration.
    """
    raw = {name: getattr(params, name) for name in WEIGHT_NAMES}
    if not options.sigma_reparam:
        return raw, None
    if params.sigma_gammas is None:
        raise ShapeError("sigma_reparam enabled but params carry no sigma_gammas")
    sigma = {}
    eff = {}
    for i, name in enumerate(WEIGHT_NAMES):
        s = spectral_norms[name] if spectral_norms is not None else spectral_norm(raw[name])
        if s == 0.0:
            raise DegenerateScaleError(f"sigma reparam on zero matrix {name}")
        sigma[name] = float(s)
        eff[name] = (params.sigma_gammas[i] / s) * raw[name]
    return eff, sigma


def forward(x: np.ndarray, params: ModelParams, dims: ModelDims,
            options: ModelOptions,
            spectral_norms: dict | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Full pipeline: RevIN -> attention block -> linear head -> inverse RevIN.

    ``x`` is one D x L window or a stacked batch (B, D, L); the output has
    the matching shape with H columns. The returned cache feeds ``backward``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xs = x[None] if single else x
    if xs.ndim != 3 or xs.shape[1] != dims.channels or xs.shape[2] != dims.lookback:
        raise ShapeError(f"input shape {x.shape} does not match dims "
                         f"(D={dims.channels}, L={dims.lookback})")
    bsz = xs.shape[0]
    d, length, dm = dims.channels, dims.lookback, dims.d_model

    if options.revin:
        if np.any(params.revin_gamma == 0.0):
            raise DegenerateScaleError("revin gamma has a zero entry")
        mu = xs.mean(axis=2)
        centered = xs - mu[:, :, None]
        var = (centered * centered).mean(axis=2)
        denom = np.sqrt(var + options.revin_eps)
        x_hat = centered / denom[:, :, None]
        xn = params.revin_gamma[None, :, None] * x_hat + params.revin_beta[None, :, None]
    else:
        mu = var = denom = x_hat = None
        xn = xs

    eff, sigma = effective_weights(params, options, spectral_norms)
    scale = np.sqrt(float(dm))

    q = k = scores = v1 = None
    if options.variant is AttentionVariant.CHANNEL_WISE:
        q = _stack_mm(xn, eff["w_q"])
        k = _stack_mm(xn, eff["w_k"])
        scores = np.empty((bsz, d, d))
        for b in range(bsz):
            scores[b] = matmul(q[b], k[b].T) / scale
        attn = softmax_rows(scores.reshape(bsz * d, d)).reshape(bsz, d, d)
        v1 = np.empty_like(xn)
        for b in range(bsz):
            v1[b] = matmul(attn[b], xn[b])
        v2 = _stack_mm(v1, eff["w_v"])
        value_out = _stack_mm(v2, eff["w_o"])
    elif options.variant is AttentionVariant.IDENTITY:
        attn = np.broadcast_to(np.eye(d), (bsz, d, d)).copy()
        v2 = _stack_mm(xn, eff["w_v"])
        value_out = _stack_mm(v2, eff["w_o"])
    else:  # temporal: attention over timesteps, on the transposed window
        xt = np.ascontiguousarray(xn.transpose(0, 2, 1))  # (B, L, D)
        q = _stack_mm(xt, eff["w_q"])
        k = _stack_mm(xt, eff["w_k"])
        scores = np.empty((bsz, length, length))
        for b in range(bsz):
            scores[b] = matmul(q[b], k[b].T) / scale
        attn = softmax_rows(scores.reshape(bsz * length, length)).reshape(bsz, length, length)
        v1 = np.empty_like(xt)
        for b in range(bsz):
            v1[b] = matmul(attn[b], xt[b])
        v2 = _stack_mm(v1, eff["w_v"])
        value_out = np.ascontiguousarray(_stack_mm(v2, eff["w_o"]).transpose(0, 2, 1))

    resid = xn + value_out
    y_norm = _stack_mm(resid, eff["w"])

    if options.revin:
        ys = (denom[:, :, None] * (y_norm - params.revin_beta[None, :, None])
              / params.revin_gamma[None, :, None] + mu[:, :, None])
    else:
        ys = y_norm

    cache = ForwardCache(
        x=xs, x_norm=xn, x_hat=x_hat, mu=mu, var=var, denom=denom,
        epsilon=options.revin_eps, q=q, k=k, scores=scores, attn=attn, v1=v1,
        v2=v2, value_out=value_out, resid=resid, y_norm=y_norm, y=ys,
        eff=eff, sigma=sigma, single=single)
    return (ys[0] if single else ys), cache


def _softmax_backward(attn: np.ndarray, d_attn: np.ndarray) -> np.ndarray:
    inner = (d_attn * attn).sum(axis=-1, keepdims=True)
    return attn * (d_attn - inner)


def backward(cache: ForwardCache, dl_dy: np.ndarray, params: ModelParams,
             options: ModelOptions) -> Gradients:
    """Gradients of the cached forward pass for every trainable tensor.

    ``dl_dy`` matches the forward output shape (one window or a batch);
    batch gradients are summed. Spectral norms are constants here, exactly as
    ``sigma_reparam_apply`` documents.
    """
    dl_dy = np.asarray(dl_dy, dtype=np.float64)
    dys = dl_dy[None] if dl_dy.ndim == 2 else dl_dy
    if dys.shape != cache.y.shape:
        raise ShapeError(f"dl_dy shape {dl_dy.shape} does not match cached output "
                         f"{cache.y.shape}")
    bsz, d, _ = cache.x.shape
    eff = cache.eff
    dm = eff["w_q"].shape[1]
    scale = np.sqrt(float(dm))

    g_beta = np.zeros(d)
    g_gamma = np.zeros(d)
    if options.revin:
        row_scale = cache.denom / params.revin_gamma[None, :]
        dyn = dys * row_scale[:, :, None]
        g_beta -= dyn.sum(axis=(0, 2))
        g_gamma -= ((dyn * (cache.y_norm - params.revin_beta[None, :, None])).sum(axis=(0, 2))
                    / params.revin_gamma)
    else:
        dyn = dys

    def t2(x3):  # (B, R, C) -> (B*R, C) stacked rows
        return x3.reshape(-1, x3.shape[2])

    d_eff = {}
    d_eff["w"] = matmul(t2(cache.resid).T, t2(dyn))
    dresid = _stack_mm(dyn, eff["w"].T)
    dxn = dresid.copy()
    dvalue = dresid

    if options.variant is AttentionVariant.TEMPORAL:
        xt = np.ascontiguousarray(cache.x_norm.transpose(0, 2, 1))
        dvo_t = np.ascontiguousarray(dvalue.transpose(0, 2, 1))  # (B, L, D)
        dv2 = _stack_mm(dvo_t, eff["w_o"].T)
        d_eff["w_o"] = matmul(t2(cache.v2).T, t2(dvo_t))
        dv1 = _stack_mm(dv2, eff["w_v"].T)
        d_eff["w_v"] = matmul(t2(cache.v1).T, t2(dv2))
        d_attn = np.empty_like(cache.attn)
        dxt = np.empty_like(xt)
        for b in range(bsz):
            d_attn[b] = matmul(dv1[b], xt[b].T)
            dxt[b] = matmul(cache.attn[b].T, dv1[b])
        ds = _softmax_backward(cache.attn, d_attn)
        dq = np.empty_like(cache.q)
        dk = np.empty_like(cache.k)
        for b in range(bsz):
            dq[b] = matmul(ds[b], cache.k[b]) / scale
            dk[b] = matmul(ds[b].T, cache.q[b]) / scale
        d_eff["w_q"] = matmul(t2(xt).T, t2(dq))
        d_eff["w_k"] = matmul(t2(xt).T, t2(dk))
        dxt += _stack_mm(dq, eff["w_q"].T)
        dxt += _stack_mm(dk, eff["w_k"].T)
        dxn += dxt.transpose(0, 2, 1)
    else:
        dv2 = _stack_mm(dvalue, eff["w_o"].T)
        d_eff["w_o"] = matmul(t2(cache.v2).T, t2(dvalue))
        v1 = cache.x_norm if options.variant is AttentionVariant.IDENTITY else cache.v1
        dv1 = _stack_mm(dv2, eff["w_v"].T)
        d_eff["w_v"] = matmul(t2(v1).T, t2(dv2))
        if options.variant is AttentionVariant.CHANNEL_WISE:
            d_attn = np.empty_like(cache.attn)
            for b in range(bsz):
                d_attn[b] = matmul(dv1[b], cache.x_norm[b].T)
                dxn[b] += matmul(cache.attn[b].T, dv1[b])
            ds = _softmax_backward(cache.attn, d_attn)
            dq = np.empty_like(cache.q)
            dk = np.empty_like(cache.k)
            for b in range(bsz):
                dq[b] = matmul(ds[b], cache.k[b]) / scale
                dk[b] = matmul(ds[b].T, cache.q[b]) / scale
            d_eff["w_q"] = matmul(t2(cache.x_norm).T, t2(dq))
            d_eff["w_k"] = matmul(t2(cache.x_norm).T, t2(dk))
            dxn += _stack_mm(dq, eff["w_q"].T)
            dxn += _stack_mm(dk, eff["w_k"].T)
        else:
            dxn += dv1
            d_eff["w_q"] = np.zeros_like(eff["w_q"])
            d_eff["w_k"] = np.zeros_like(eff["w_k"])

    if options.revin:
        g_beta += dxn.sum(axis=(0, 2))
        g_gamma += (dxn * cache.x_hat).sum(axis=(0, 2))

    if options.sigma_reparam:
        g_sigma = np.zeros(len(WEIGHT_NAMES))
        grads_w = {}
        for i, name in enumerate(WEIGHT_NAMES):
            s = cache.sigma[name]
            grads_w[name] = (params.sigma_gammas[i] / s) * d_eff[name]
            g_sigma[i] = float((d_eff[name] * getattr(params, name)).sum()) / s
    else:
        g_sigma = None
        grads_w = d_eff

    return Gradients(
        w_q=grads_w["w_q"], w_k=grads_w["w_k"], w_v=grads_w["w_v"],
        w_o=grads_w["w_o"], w=grads_w["w"],
        revin_beta=g_beta, revin_gamma=g_gamma, sigma_gammas=g_sigma)
