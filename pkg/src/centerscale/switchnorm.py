"""Switchable Normalization with hand-derived gradients.

SN normalizes with a softmax-weighted mix of instance (IN), layer (LN) and
batch (BN) statistics.  Weight vectors are always ordered (IN, LN, BN).
Plain BN/IN/LN live here too so the one-hot reductions can be checked
against independent code.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .tensor import TensorError, load_checkpoint, reduce_stats, save_checkpoint

KINDS = ("in", "ln", "bn")


class NormError(ValueError):
    pass


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class SnLayer:
    gamma: np.ndarray
    beta: np.ndarray
    mean_logits: np.ndarray = field(default_factory=lambda: np.zeros(3))
    var_logits: np.ndarray = field(default_factory=lambda: np.zeros(3))
    running_bn_mean: np.ndarray | None = None
    running_bn_var: np.ndarray | None = None
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches_tracked: int = 0

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.mean_logits = np.asarray(self.mean_logits, dtype=np.float64)
        self.var_logits = np.asarray(self.var_logits, dtype=np.float64)
        c = self.gamma.shape[0]
        if self.running_bn_mean is None:
            self.running_bn_mean = np.zeros(c)
        if self.running_bn_var is None:
            self.running_bn_var = np.ones(c)
        if self.eps <= 0:
            raise NormError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise NormError("momentum must lie in (0, 1)")

    @classmethod
    def create(cls, channels: int, **kw) -> "SnLayer":
        return cls(gamma=np.ones(channels), beta=np.zeros(channels), **kw)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def mean_weights(self) -> np.ndarray:
        return softmax(self.mean_logits)

    @property
    def var_weights(self) -> np.ndarray:
        return softmax(self.var_logits)

    def params(self) -> dict:
        return {
            "gamma": self.gamma,
            "beta": self.beta,
            "mean_logits": self.mean_logits,
            "var_logits": self.var_logits,
        }

    def state_dict(self) -> dict:
        d = {k: v.copy() for k, v in self.params().items()}
        d["running_bn_mean"] = self.running_bn_mean.copy()
        d["running_bn_var"] = self.running_bn_var.copy()
        d["momentum"] = np.array([self.momentum])
        d["eps"] = np.array([self.eps])
        d["num_batches_tracked"] = np.array([float(self.num_batches_tracked)])
        return d

    @classmethod
    def from_state_dict(cls, d: dict) -> "SnLayer":
        return cls(
            gamma=d["gamma"],
            beta=d["beta"],
            mean_logits=d["mean_logits"],
            var_logits=d["var_logits"],
            running_bn_mean=np.asarray(d["running_bn_mean"], dtype=np.float64),
            running_bn_var=np.asarray(d["running_bn_var"], dtype=np.float64),
            momentum=float(d["momentum"][0]),
            eps=float(d["eps"][0]),
            num_batches_tracked=int(d["num_batches_tracked"][0]),
        )


def save_layer(path, layer: SnLayer) -> None:
    save_checkpoint(path, layer.state_dict())


def load_layer(path) -> SnLayer:
    return SnLayer.from_state_dict(load_checkpoint(path))


@dataclass
class NormStats:
    mu_in: np.ndarray   # (N, C)
    var_in: np.ndarray
    mu_ln: np.ndarray   # (N,)
    var_ln: np.ndarray
    mu_bn: np.ndarray   # (C,)
    var_bn: np.ndarray


def _check_x(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise NormError(f"expected (N, C, H, W) input, got shape {x.shape}")
    return x


def compute_stats(x) -> NormStats:
    x = _check_x(x)
    try:
        m_in, v_in = reduce_stats(x, "HW")
        m_ln, v_ln = reduce_stats(x, "CHW")
        m_bn, v_bn = reduce_stats(x, "NHW")
    except TensorError as e:
        raise NormError(str(e)) from e
    return NormStats(
        mu_in=m_in[:, :, 0, 0], var_in=v_in[:, :, 0, 0],
        mu_ln=m_ln[:, 0, 0, 0], var_ln=v_ln[:, 0, 0, 0],
        mu_bn=m_bn[0, :, 0, 0], var_bn=v_bn[0, :, 0, 0],
    )


def _mix(w, s_in, s_ln, s_bn) -> np.ndarray:
    """Weighted (N, C) mix of per-(n,c), per-n and per-c statistics."""
    return w[0] * s_in + w[1] * s_ln[:, None] + w[2] * s_bn[None, :]


def _check_override(pair):
    wm, wv = (np.asarray(p, dtype=np.float64) for p in pair)
    for w in (wm, wv):
        if w.shape != (3,) or abs(w.sum() - 1.0) > 1e-12 or (w < 0).any():
            raise NormError("weight override must be a non-negative 3-vector summing to 1")
    return wm, wv


def sn_forward(layer: SnLayer, x, mode: str = "train", weight_override=None):
    """Returns ``(y, cache)``.  Train mode updates the running BN statistics."""
    x = _check_x(x)
    n, c, h, w = x.shape
    if c != layer.channels:
        raise NormError(f"layer has {layer.channels} channels, input has {c}")
    if mode not in ("train", "eval"):
        raise NormError(f"unknown mode {mode!r}")
    stats = compute_stats(x)
    if mode == "eval":
        if layer.num_batches_tracked == 0:
            raise NormError("uninitialized running statistics")
        mu_bn, var_bn = layer.running_bn_mean, layer.running_bn_var
    else:
        mu_bn, var_bn = stats.mu_bn, stats.var_bn
        m = layer.momentum
        layer.running_bn_mean = (1 - m) * layer.running_bn_mean + m * stats.mu_bn
        layer.running_bn_var = (1 - m) * layer.running_bn_var + m * stats.var_bn
        layer.num_batches_tracked += 1

    if weight_override is not None:
        wm, wv = _check_override(weight_override)
    else:
        wm, wv = layer.mean_weights, layer.var_weights

    mu = _mix(wm, stats.mu_in, stats.mu_ln, mu_bn)
    var = _mix(wv, stats.var_in, stats.var_ln, var_bn)
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xc = x - mu[:, :, None, None]
    xhat = xc * inv_std[:, :, None, None]
    y = layer.gamma[None, :, None, None] * xhat + layer.beta[None, :, None, None]
    cache = {
        "x": x, "xhat": xhat, "inv_std": inv_std, "stats": stats,
        "mu_bn": mu_bn, "var_bn": var_bn, "wm": wm, "wv": wv,
        "mode": mode, "override": weight_override is not None,
        "gamma": layer.gamma.copy(),
    }
    return y, cache


def sn_backward(layer: SnLayer, cache: dict, dy):
    """Gradients ``(dx, dgamma, dbeta, dmean_logits, dvar_logits)``.

    Differentiates through all three statistic families and through both
    softmaxes.  With a weight override the logit gradients are zero.
    """
    dy = np.asarray(dy, dtype=np.float64)
    x = cache["x"]
    if dy.shape != x.shape:
        raise NormError("gradient shape mismatch")
    if cache["mode"] != "train":
        raise NormError("backward requires a train-mode cache")
    n, c, h, w = x.shape
    st: NormStats = cache["stats"]
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    wm, wv = cache["wm"], cache["wv"]
    gamma = cache["gamma"]

    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]

    # gradients w.r.t. the mixed (N, C) mean and variance
    dmu = -(dxhat * inv_std[:, :, None, None]).sum(axis=(2, 3))
    dvar = -0.5 * (dxhat * xhat).sum(axis=(2, 3)) * inv_std ** 2

    dx = dxhat * inv_std[:, :, None, None]

    hw = h * w
    # IN: per (n, c) over H, W
    dmu_in, dvar_in = wm[0] * dmu, wv[0] * dvar
    dx += (dmu_in[:, :, None, None]
           + 2.0 * dvar_in[:, :, None, None] * (x - st.mu_in[:, :, None, None])) / hw
    # LN: per n over C, H, W
    dmu_ln, dvar_ln = wm[1] * dmu.sum(axis=1), wv[1] * dvar.sum(axis=1)
    dx += (dmu_ln[:, None, None, None]
           + 2.0 * dvar_ln[:, None, None, None] * (x - st.mu_ln[:, None, None, None])) / (c * hw)
    # BN: per c over N, H, W
    dmu_bn, dvar_bn = wm[2] * dmu.sum(axis=0), wv[2] * dvar.sum(axis=0)
    dx += (dmu_bn[None, :, None, None]
           + 2.0 * dvar_bn[None, :, None, None] * (x - st.mu_bn[None, :, None, None])) / (n * hw)

    if cache["override"]:
        dml = np.zeros(3)
        dvl = np.zeros(3)
    else:
        dwm = np.array([
            (dmu * st.mu_in).sum(),
            (dmu * st.mu_ln[:, None]).sum(),
            (dmu * st.mu_bn[None, :]).sum(),
        ])
        dwv = np.array([
            (dvar * st.var_in).sum(),
            (dvar * st.var_ln[:, None]).sum(),
            (dvar * st.var_bn[None, :]).sum(),
        ])
        dml = wm * (dwm - wm @ dwm)
        dvl = wv * (dwv - wv @ dwv)
    return dx, dgamma, dbeta, dml, dvl


# -- plain batch / instance / layer normalization ----------------------------

@dataclass
class BnLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches_tracked: int = 0

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        c = self.gamma.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(c)
        if self.running_var is None:
            self.running_var = np.ones(c)

    @classmethod
    def create(cls, channels: int, **kw) -> "BnLayer":
        return cls(gamma=np.ones(channels), beta=np.zeros(channels), **kw)

    def params(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}


def bn_forward(layer: BnLayer, x, mode: str = "train"):
    x = _check_x(x)
    n, c, h, w = x.shape
    if c != layer.gamma.shape[0]:
        raise NormError(f"layer has {layer.gamma.shape[0]} channels, input has {c}")
    if mode == "train":
        if n * h * w == 0:
            raise NormError("empty reduction")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = layer.momentum
        layer.running_mean = (1 - m) * layer.running_mean + m * mean
        layer.running_var = (1 - m) * layer.running_var + m * var
        layer.num_batches_tracked += 1
    elif mode == "eval":
        if layer.num_batches_tracked == 0:
            raise NormError("uninitialized running statistics")
        mean, var = layer.running_mean, layer.running_var
    else:
        raise NormError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = layer.gamma[None, :, None, None] * xhat + layer.beta[None, :, None, None]
    return y, {"xhat": xhat, "inv_std": inv_std, "gamma": layer.gamma.copy(), "mode": mode}


def bn_backward(cache: dict, dy):
    """Classic compact BN backward; returns ``(dx, dgamma, dbeta)``."""
    dy = np.asarray(dy, dtype=np.float64)
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    if dy.shape != xhat.shape:
        raise NormError("gradient shape mismatch")
    if cache["mode"] != "train":
        raise NormError("backward requires a train-mode cache")
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * cache["gamma"][None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return dx, dgamma, dbeta


def in_forward(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    x = _check_x(x)
    mean = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    g = np.asarray(gamma)[None, :, None, None]
    b = np.asarray(beta)[None, :, None, None]
    return g * (x - mean) / np.sqrt(var + eps) + b


def ln_forward(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    x = _check_x(x)
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    var = x.var(axis=(1, 2, 3), keepdims=True)
    g = np.asarray(gamma)[None, :, None, None]
    b = np.asarray(beta)[None, :, None, None]
    return g * (x - mean) / np.sqrt(var + eps) + b


# -- weight-proportion report -------------------------------------------------

def weight_report(layers) -> dict:
    """Average softmax mixing weights per network part.

    ``layers`` is a sequence of ``(part_label, SnLayer)``.  Parts keep their
    first-seen order; a part with no layers never appears.
    """
    groups: dict[str, list[SnLayer]] = {}
    for label, layer in layers:
        groups.setdefault(label, []).append(layer)
    report = {}
    for label, group in groups.items():
        report[label] = {
            "mean": np.mean([l.mean_weights for l in group], axis=0),
            "var": np.mean([l.var_weights for l in group], axis=0),
        }
    return report


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["part", "stat", "w_in", "w_ln", "w_bn"])
    for part, entry in report.items():
        for stat in ("mean", "var"):
            wr.writerow([part, stat, *(f"{v:.12g}" for v in entry[stat])])
    return buf.getvalue()
