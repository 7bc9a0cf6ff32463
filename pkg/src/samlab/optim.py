"""Losses, base optimizers, the SAM wrapper, LR schedule and early stopping.

Optimizers act on flat float64 parameter vectors; the trainer owns the
packing. A SAM step composes two gradient evaluations of a caller-supplied
closure and then delegates to the selected base update, so a zero
neighborhood radius degenerates bit-for-bit to the base optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError


def mse_loss_and_grad(y_hat: np.ndarray, y: np.ndarray, n_in_batch: int,
                      d: int) -> tuple[float, np.ndarray]:
    """Training-loss contribution of the given predictions and its gradient.

    The contribution is sum over samples of ||Y - Yhat||_F^2 / (N * D) with
    N = ``n_in_batch``; the gradient w.r.t. Yhat is -2 (Y - Yhat) / (N * D).
    Accepts a single D x H pair or stacked B x D x H batches.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeError(f"mse shapes differ: {y_hat.shape} vs {y.shape}")
    diff = y - y_hat
    scale = 1.0 / (float(n_in_batch) * float(d))
    loss = float((diff * diff).sum()) * scale
    grad = -2.0 * scale * diff
    return loss, grad


def mae_metric(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Elementwise mean absolute error over everything passed in."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeError(f"mae shapes differ: {y_hat.shape} vs {y.shape}")
    return float(np.abs(y - y_hat).mean())


@dataclass
class OptState:
    """Mutable state of one base optimizer over a flat parameter vector."""

    kind: str  # "adam" | "adamw" | "sgd"
    n_params: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4  # adamw only
    momentum: float = 0.9  # sgd only
    t: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw", "sgd"):
            raise ShapeError(f"unknown optimizer kind: {self.kind!r}")
        self.m = np.zeros(self.n_params, dtype=np.float64)
        self.v = np.zeros(self.n_params, dtype=np.float64)


def base_step(state: OptState, params_flat: np.ndarray, grads_flat: np.ndarray,
              lr: float) -> np.ndarray:
    """One update of the selected base optimizer; returns the new parameters."""
    params_flat = np.asarray(params_flat, dtype=np.float64)
    grads_flat = np.asarray(grads_flat, dtype=np.float64)
    if params_flat.shape != grads_flat.shape or params_flat.shape != state.m.shape:
        raise ShapeError(
            f"length mismatch: params {params_flat.shape}, grads {grads_flat.shape}, "
            f"state {state.m.shape}")
    state.t += 1
    if state.kind == "sgd":
        state.m = state.momentum * state.m + grads_flat
        return params_flat - lr * state.m
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads_flat
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads_flat * grads_flat
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    new = params_flat - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.kind == "adamw":
        new = new - lr * state.weight_decay * params_flat
    return new


@dataclass
class SamConfig:
    """Sharpness-aware minimization settings.

    ``rho`` is the perturbation radius; zero recovers the base optimizer
    exactly. ``perturb_mask`` optionally restricts the ascent direction to a
    subset of coordinates (used to leave normalization parameters in place
    while still training them).
    """

    rho: float = 0.0
    perturb_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.rho < 0:
            raise ShapeError(f"rho must be >= 0, got {self.rho}")


def sam_step(loss_grad_fn, params_flat: np.ndarray, sam: SamConfig,
             state: OptState, lr: float) -> np.ndarray:
    """One SAM update: ascend rho along the normalized gradient, re-evaluate.

    ``loss_grad_fn(params) -> (loss, grad)`` is called once when rho is zero
    or the gradient vanishes, twice otherwise. Non-finite losses or gradients
    abort with the optimizer step index in the message.
    """
    params_flat = np.asarray(params_flat, dtype=np.float64)
    loss, g1 = loss_grad_fn(params_flat)
    _check_finite(loss, g1, state.t + 1)
    if sam.rho > 0.0:
        ascent = g1 if sam.perturb_mask is None else g1 * sam.perturb_mask
        norm = float(np.sqrt(ascent @ ascent))
        if norm > 0.0:
            perturbed = params_flat + (sam.rho / norm) * ascent
            loss2, g2 = loss_grad_fn(perturbed)
            _check_finite(loss2, g2, state.t + 1)
            return base_step(state, params_flat, g2, lr)
    return base_step(state, params_flat, g1, lr)


def _check_finite(loss: float, grad: np.ndarray, step: int) -> None:
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss at optimizer step {step}")
    if not np.isfinite(grad).all():
        raise NumericError(f"non-finite gradient at optimizer step {step}")


def cosine_lr(t: int, total: int, lr_max: float) -> float:
    """Cosine annealing from lr_max at t=0 down to 0 at t=total."""
    if total < 1 or t < 0 or t > total:
        raise ShapeError(f"cosine_lr requires 0 <= t <= total, total >= 1; got t={t}, total={total}")
    return lr_max * (1.0 + math.cos(math.pi * t / total)) / 2.0


@dataclass
class EarlyStop:
    """Patience counter over validation loss; ties count as non-improving."""

    patience: int
    best_val: float = math.inf
    epochs_since_improve: int = 0


def early_stop_update(es: EarlyStop, val_loss: float) -> bool:
    """Record one epoch's validation loss; True means stop now."""
    if not math.isfinite(val_loss):
        raise NumericError(f"non-finite validation loss: {val_loss}")
    if val_loss < es.best_val:
        es.best_val = val_loss
        es.epochs_since_improve = 0
        return False
    es.epochs_since_improve += 1
    return es.epochs_since_improve > es.patience
