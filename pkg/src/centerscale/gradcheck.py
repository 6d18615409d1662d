"""Central finite-difference checks for the hand-derived gradients."""
from __future__ import annotations

import numpy as np

from .codec import TargetMaps
from .losses import center_loss, offset_loss, scale_loss
from .switchnorm import (BnLayer, SnLayer, bn_backward, bn_forward, sn_backward,
                         sn_forward)

STEP = 1e-5
TOLERANCE = 1e-5


def numerical_gradient(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def _sn_case(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(0.5, 2.0, size=(2, 3, 4, 4))
    layer = SnLayer(
        gamma=rng.normal(1.0, 0.3, 3),
        beta=rng.normal(0.0, 0.3, 3),
        mean_logits=rng.normal(0.0, 1.0, 3),
        var_logits=rng.normal(0.0, 1.0, 3),
    )
    proj = rng.normal(size=x.shape)

    def loss():
        y, _ = sn_forward(layer, x, "train")
        return float((y * proj).sum())

    _, cache = sn_forward(layer, x, "train")
    dx, dg, db, dml, dvl = sn_backward(layer, cache, proj)
    errs = {
        "sn.x": relative_error(dx, numerical_gradient(loss, x)),
        "sn.gamma": relative_error(dg, numerical_gradient(loss, layer.gamma)),
        "sn.beta": relative_error(db, numerical_gradient(loss, layer.beta)),
        "sn.mean_logits": relative_error(dml, numerical_gradient(loss, layer.mean_logits)),
        "sn.var_logits": relative_error(dvl, numerical_gradient(loss, layer.var_logits)),
    }
    return errs


def _bn_case(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(-0.3, 1.5, size=(2, 3, 4, 4))
    layer = BnLayer(gamma=rng.normal(1.0, 0.3, 3), beta=rng.normal(0.0, 0.3, 3))
    proj = rng.normal(size=x.shape)

    def loss():
        y, _ = bn_forward(layer, x, "train")
        return float((y * proj).sum())

    _, cache = bn_forward(layer, x, "train")
    dx, dg, db = bn_backward(cache, proj)
    return {
        "bn.x": relative_error(dx, numerical_gradient(loss, x)),
        "bn.gamma": relative_error(dg, numerical_gradient(loss, layer.gamma)),
        "bn.beta": relative_error(db, numerical_gradient(loss, layer.beta)),
    }


def random_targets(rng, shape, n_pos):
    """Random target maps with ``n_pos`` positives and a partial Gaussian mask."""
    flat = rng.choice(int(np.prod(shape)), size=n_pos, replace=False)
    pos = np.zeros(int(np.prod(shape)), dtype=bool)
    pos[flat] = True
    pos = pos.reshape(shape)
    gauss = np.where(pos, 1.0, rng.uniform(0.0, 0.95, size=shape))
    return TargetMaps(
        center=pos.astype(np.float64),
        gauss_mask=gauss,
        scale=np.where(pos, rng.uniform(2.0, 4.0, size=shape), 0.0),
        offset_x=np.where(pos, rng.uniform(0.0, 1.0, size=shape), 0.0),
        offset_y=np.where(pos, rng.uniform(0.0, 1.0, size=shape), 0.0),
        pos_mask=pos,
    )


def _loss_case(seed: int):
    rng = np.random.default_rng(seed)
    shape = (5, 6)
    t = random_targets(rng, shape, 4)
    p = rng.uniform(0.05, 0.95, size=shape)
    _, g = center_loss(p, t)
    errs = {"loss.center": relative_error(g, numerical_gradient(lambda: center_loss(p, t)[0], p))}

    # keep residuals away from the |d| = 0 and |d| = 1 kinks
    def away_from_kinks(target):
        d = rng.uniform(0.1, 0.8, size=shape) * rng.choice([-1, 1], size=shape)
        d = np.where(rng.random(shape) < 0.5, d, d * 2.5)
        return target + d

    for variant in ("smooth", "vanilla"):
        s = away_from_kinks(t.scale)
        _, gs = scale_loss(s, t, variant)
        num = numerical_gradient(lambda: scale_loss(s, t, variant)[0], s)
        errs[f"loss.scale.{variant}"] = relative_error(gs, num)

    ox = away_from_kinks(t.offset_x)
    oy = away_from_kinks(t.offset_y)
    _, (gx, gy) = offset_loss(ox, oy, t)
    nx = numerical_gradient(lambda: offset_loss(ox, oy, t)[0], ox)
    ny = numerical_gradient(lambda: offset_loss(ox, oy, t)[0], oy)
    errs["loss.offset"] = relative_error(np.concatenate([gx.ravel(), gy.ravel()]),
                                         np.concatenate([nx.ravel(), ny.ravel()]))
    return errs


def run_suite(seeds=range(5)) -> dict:
    """Max relative error per gradient over all seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for case in (_sn_case, _bn_case, _loss_case):
            for name, err in case(seed).items():
                worst[name] = max(worst.get(name, 0.0), err)
    return worst
