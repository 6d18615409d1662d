"""Detection losses, Adam and parameter moving averages.

Every loss returns ``(value, gradient)`` with the gradient taken w.r.t. the
prediction map(s).  Maps may carry any leading batch axes; positives are
counted across the whole array.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .codec import TargetMaps

PROB_CLAMP = 1e-12


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_center: float
    lambda_scale: float
    lambda_offset: float
    scale_variant: str = "smooth"

    def __post_init__(self):
        if min(self.lambda_center, self.lambda_scale, self.lambda_offset) <= 0:
            raise ValueError("loss weights must be positive")
        if self.scale_variant not in ("smooth", "vanilla"):
            raise ValueError(f"unknown scale variant {self.scale_variant!r}")

    @classmethod
    def preset(cls, variant: str) -> "LossWeights":
        if variant == "smooth":
            return cls(0.01, 1.0, 0.1, "smooth")
        if variant == "vanilla":
            return cls(0.01, 0.05, 0.1, "vanilla")
        raise ValueError(f"unknown preset {variant!r}")


def center_loss(pred, targets: TargetMaps, gamma: float = 2.0, beta_neg: float = 4.0):
    """Focal-style center classification loss, normalized by positive count."""
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    pos = targets.pos_mask
    k = max(1, int(pos.sum()))
    neg_w = (1.0 - targets.gauss_mask) ** beta_neg
    lp, l1p = np.log(p), np.log1p(-p)

    pos_term = (1 - p) ** gamma * lp
    neg_term = neg_w * p ** gamma * l1p
    loss = -(np.where(pos, pos_term, 0.0).sum() + np.where(pos, 0.0, neg_term).sum()) / k

    d_pos = -gamma * (1 - p) ** (gamma - 1) * lp + (1 - p) ** gamma / p
    d_neg = neg_w * (gamma * p ** (gamma - 1) * l1p - p ** gamma / (1 - p))
    grad = -np.where(pos, d_pos, d_neg) / k
    return float(loss), grad


def smooth_l1(d):
    a = np.abs(d)
    return np.where(a < 1.0, 0.5 * d * d, a - 0.5)


def smooth_l1_grad(d):
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


def scale_loss(pred, targets: TargetMaps, variant: str = "smooth"):
    pred = np.asarray(pred, dtype=np.float64)
    pos = targets.pos_mask
    k = int(pos.sum())
    if k == 0:
        return 0.0, np.zeros_like(pred)
    d = np.where(pos, pred - targets.scale, 0.0)
    if variant == "smooth":
        per, g = smooth_l1(d), smooth_l1_grad(d)
    elif variant == "vanilla":
        # np.sign gives the zero subgradient at an exact fit
        per, g = np.abs(d), np.sign(d)
    else:
        raise ValueError(f"unknown scale variant {variant!r}")
    return float(per[pos].sum() / k), np.where(pos, g, 0.0) / k


def offset_loss(pred_x, pred_y, targets: TargetMaps):
    pred_x = np.asarray(pred_x, dtype=np.float64)
    pred_y = np.asarray(pred_y, dtype=np.float64)
    pos = targets.pos_mask
    k = int(pos.sum())
    if k == 0:
        return 0.0, (np.zeros_like(pred_x), np.zeros_like(pred_y))
    dx = np.where(pos, pred_x - targets.offset_x, 0.0)
    dy = np.where(pos, pred_y - targets.offset_y, 0.0)
    loss = (smooth_l1(dx)[pos].sum() + smooth_l1(dy)[pos].sum()) / (2 * k)
    gx = np.where(pos, smooth_l1_grad(dx), 0.0) / (2 * k)
    gy = np.where(pos, smooth_l1_grad(dy), 0.0) / (2 * k)
    return float(loss), (gx, gy)


def total_loss(parts, w: LossWeights) -> float:
    lc, ls, lo = parts
    return w.lambda_center * lc + w.lambda_scale * ls + w.lambda_offset * lo


# -- optimization ---------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: OptimState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam, applied in place to ``params`` (which is returned)."""
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if np.shape(params[name]) != g.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("divergent gradient")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class EmaState:
    shadow: dict
    decay: float = 0.999

    def __post_init__(self):
        if not 0 <= self.decay < 1:
            raise ValueError("EMA decay must lie in [0, 1)")

    @classmethod
    def track(cls, params: dict, decay: float = 0.999) -> "EmaState":
        return cls({k: np.array(v, dtype=np.float64) for k, v in params.items()}, decay)


def ema_update(ema: EmaState, params: dict) -> EmaState:
    a = ema.decay
    for name, p in params.items():
        if ema.shadow[name].shape != np.shape(p):
            raise ValueError(f"shape mismatch for {name!r}")
        ema.shadow[name] = a * ema.shadow[name] + (1 - a) * np.asarray(p, dtype=np.float64)
    return ema


@contextmanager
def ema_swap_for_eval(ema: EmaState, params: dict):
    """Temporarily load the shadow values into ``params`` in place."""
    saved = {k: np.array(v) for k, v in params.items()}
    try:
        for k in params:
            params[k][...] = ema.shadow[k]
        yield params
    finally:
        for k in params:
            params[k][...] = saved[k]
