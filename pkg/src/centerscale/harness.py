"""Synthetic scenes, a desk-scale trainer and the ablation experiments.

The "network" is a normalization layer followed by a per-pixel affine head
producing four maps (center logit, log-scale, x offset, y offset).  Scene
features are a fixed linear mixing of the target maps plus noise, so an
exact oracle head exists and every stage downstream of the backbone can be
exercised end to end.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .codec import EncoderConfig, GtBox, TargetMaps, decode, encode, iou, stack_targets
from .evaluator import REASONABLE, STANDARD_SUBSETS, evaluate
from .losses import (DivergenceError, EmaState, LossWeights, OptimState, adam_step,
                     center_loss, ema_swap_for_eval, ema_update, offset_loss, scale_loss,
                     total_loss)
from .switchnorm import BnLayer, SnLayer, bn_backward, bn_forward, sn_backward, sn_forward

MIXING_SEED = 20200410
SOURCE_NAMES = ("center", "gauss_mask", "scale", "offset_x", "offset_y")
ORACLE_CENTER_GAIN = 20.0


class ConfigError(ValueError):
    pass


def config_hash(cfg) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class SceneConfig:
    height: int = 256
    width: int = 512
    stride: int = 4
    min_count: int = 2
    max_count: int = 8
    min_height: float = 40.0
    max_height: float = 200.0
    aspect: float = 0.41
    channels: int = 8
    noise: float = 0.0
    min_visibility: float = 0.2
    max_overlap: float = 0.3    # pairwise IoU cap between placed boxes
    crowd: bool = False         # pack people into overlapping rows instead
    max_retries: int = 200

    def __post_init__(self):
        if self.height % self.stride or self.width % self.stride:
            raise ConfigError("scene size must be divisible by the stride")
        if not 0 < self.min_height <= self.max_height <= self.height:
            raise ConfigError("need 0 < min_height <= max_height <= image height")
        if self.channels < len(SOURCE_NAMES):
            raise ConfigError(f"need at least {len(SOURCE_NAMES)} feature channels")
        if not 0 <= self.min_count <= self.max_count:
            raise ConfigError("need 0 <= min_count <= max_count")

    @property
    def map_shape(self) -> tuple[int, int]:
        return self.height // self.stride, self.width // self.stride

    def encoder(self, **kw) -> EncoderConfig:
        return EncoderConfig(stride=self.stride, **kw)


@dataclass
class Scene:
    image_id: str
    features: np.ndarray     # (1, C, H/s, W/s)
    gts: list
    targets: TargetMaps
    shortfall: int = 0       # requested people that could not be placed


def mixing_matrix(channels: int, seed: int = MIXING_SEED) -> np.ndarray:
    """Fixed (channels, 5) matrix mapping target sources to feature channels."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.normal(0.0, 1.0, size=(channels, len(SOURCE_NAMES)))


def source_maps(t: TargetMaps) -> np.ndarray:
    return np.stack([t.center, t.gauss_mask, t.scale, t.offset_x, t.offset_y])


def _place_scattered(cfg: SceneConfig, rng, count: int):
    gts, fails = [], 0
    cells = set()
    s = cfg.stride
    while len(gts) < count:
        if fails >= cfg.max_retries:
            break
        h = math.exp(rng.uniform(math.log(cfg.min_height), math.log(cfg.max_height)))
        w = cfg.aspect * h
        x = rng.uniform(0, cfg.width - w)
        y = rng.uniform(0, cfg.height - h)
        vis = rng.uniform(cfg.min_visibility, 1.0)
        gt = GtBox(x, y, w, h, vis)
        cx, cy = gt.center
        cell = (int(cx // s), int(cy // s))
        if cell in cells or any(iou(gt, o) > cfg.max_overlap for o in gts):
            fails += 1
            continue
        cells.add(cell)
        gts.append(gt)
    return gts


def _place_crowd(cfg: SceneConfig, rng, count: int):
    """Rows of side-by-side people whose boxes overlap horizontally."""
    gts, cells = [], set()
    s = cfg.stride
    fails = 0
    while len(gts) < count and fails < cfg.max_retries:
        h0 = math.exp(rng.uniform(math.log(cfg.min_height), math.log(cfg.max_height)))
        w0 = cfg.aspect * h0
        k = int(rng.integers(2, 6))
        gap = rng.uniform(0.2, 0.7) * w0
        span = w0 + gap * (k - 1)
        if span > cfg.width or h0 * 1.1 > cfg.height:
            fails += 1
            continue
        x0 = rng.uniform(0, cfg.width - span)
        y0 = rng.uniform(0, cfg.height - 1.1 * h0)
        for j in range(k):
            if len(gts) >= count:
                break
            h = h0 * rng.uniform(0.92, 1.08)
            h = min(h, cfg.height - y0)
            w = cfg.aspect * h
            x = min(x0 + j * gap, cfg.width - w)
            gt = GtBox(x, y0, w, h, rng.uniform(cfg.min_visibility, 1.0))
            cx, cy = gt.center
            cell = (int(cx // s), int(cy // s))
            if cell in cells:
                fails += 1
                continue
            cells.add(cell)
            gts.append(gt)
    return gts


def generate_scene(cfg: SceneConfig, seed: int, image_id: str | None = None) -> Scene:
    rng = np.random.Generator(np.random.PCG64(seed))
    count = int(rng.integers(cfg.min_count, cfg.max_count + 1))
    gts = _place_crowd(cfg, rng, count) if cfg.crowd else _place_scattered(cfg, rng, count)
    targets = encode(gts, cfg.height, cfg.width, cfg.encoder())
    mix = mixing_matrix(cfg.channels)
    feats = np.einsum("ck,khw->chw", mix, source_maps(targets))
    if cfg.noise > 0:
        feats = feats + cfg.noise * rng.normal(size=feats.shape)
    return Scene(image_id or f"img{seed:06d}", feats[None], gts, targets, count - len(gts))


def generate_dataset(cfg: SceneConfig, count: int, seed: int, prefix: str = "img") -> list[Scene]:
    return [generate_scene(cfg, seed * 100_003 + i, f"{prefix}{i:04d}") for i in range(count)]


# -- model -----------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    norm: str = "SN"             # SN, BN or none
    batch_size: int = 4
    devices: int = 1             # bookkeeping label only
    steps: int = 500
    lr: float = 1e-2
    loss_preset: str = "smooth"
    ema_decay: float = 0.99
    momentum: float = 0.1
    head_init: str = "random"    # random or oracle
    seed: int = 0

    def __post_init__(self):
        if self.norm not in ("SN", "BN", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.batch_size < 1 or self.devices < 1:
            raise ConfigError("batch size and device count must be >= 1")
        if self.head_init not in ("random", "oracle"):
            raise ConfigError(f"unknown head init {self.head_init!r}")
        LossWeights.preset(self.loss_preset)


def oracle_head(channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Head weights that invert the feature mixing for unnormalized features."""
    inv = np.linalg.pinv(mixing_matrix(channels))
    w = np.stack([ORACLE_CENTER_GAIN * inv[0], inv[2], inv[3], inv[4]])
    b = np.array([-ORACLE_CENTER_GAIN / 2, 0.0, 0.0, 0.0])
    return w, b


class DeskModel:
    """Normalization layer + per-pixel affine head."""

    def __init__(self, channels: int, norm: str = "SN", head_init: str = "random",
                 seed: int = 0, momentum: float = 0.1):
        self.norm = norm
        self.channels = channels
        if norm == "SN":
            self.layer = SnLayer.create(channels, momentum=momentum)
        elif norm == "BN":
            self.layer = BnLayer.create(channels, momentum=momentum)
        else:
            self.layer = None
        if head_init == "oracle":
            w, b = oracle_head(channels)
        else:
            rng = np.random.Generator(np.random.PCG64(seed))
            w = rng.normal(0.0, 0.1, size=(4, channels))
            # prior of 1% center probability keeps the initial focal loss sane
            b = np.array([-math.log(99.0), 0.0, 0.0, 0.0])
        self.params = {"head_w": w, "head_b": b}
        if self.layer is not None:
            for name, arr in self.layer.params().items():
                self.params[f"norm_{name}"] = arr

    def forward(self, x, mode: str = "train"):
        if self.norm == "SN":
            z, ncache = sn_forward(self.layer, x, mode)
        elif self.norm == "BN":
            z, ncache = bn_forward(self.layer, x, mode)
        else:
            z, ncache = np.asarray(x, dtype=np.float64), None
        out = np.einsum("kc,nchw->nkhw", self.params["head_w"], z)
        out += self.params["head_b"][None, :, None, None]
        return out, (z, ncache)

    def backward(self, cache, dout) -> dict:
        z, ncache = cache
        grads = {
            "head_w": np.einsum("nkhw,nchw->kc", dout, z),
            "head_b": dout.sum(axis=(0, 2, 3)),
        }
        dz = np.einsum("kc,nkhw->nchw", self.params["head_w"], dout)
        if self.norm == "SN":
            _, dg, db, dml, dvl = sn_backward(self.layer, ncache, dz)
            grads.update(norm_gamma=dg, norm_beta=db, norm_mean_logits=dml, norm_var_logits=dvl)
        elif self.norm == "BN":
            _, dg, db = bn_backward(ncache, dz)
            grads.update(norm_gamma=dg, norm_beta=db)
        return grads

    def predict(self, x, mode: str = "eval"):
        """``(center_prob, scale, offset_x, offset_y)`` maps, each (N, h, w)."""
        out, _ = self.forward(x, mode)
        return _sigmoid(out[:, 0]), out[:, 1], out[:, 2], out[:, 3]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def loss_and_grad(model: DeskModel, x, targets: TargetMaps, weights: LossWeights):
    out, cache = model.forward(x, "train")
    p = _sigmoid(out[:, 0])
    lc, gc = center_loss(p, targets)
    ls, gs = scale_loss(out[:, 1], targets, weights.scale_variant)
    lo, (gx, gy) = offset_loss(out[:, 2], out[:, 3], targets)
    total = total_loss((lc, ls, lo), weights)
    dout = np.empty_like(out)
    dout[:, 0] = weights.lambda_center * gc * p * (1 - p)
    dout[:, 1] = weights.lambda_scale * gs
    dout[:, 2] = weights.lambda_offset * gx
    dout[:, 3] = weights.lambda_offset * gy
    return (lc, ls, lo, total), model.backward(cache, dout)


@dataclass
class TrainResult:
    model: DeskModel
    ema: EmaState
    curve: list = field(default_factory=list)   # (epoch, step, center, scale, offset, total)
    diverged: bool = False

    @property
    def initial_loss(self) -> float:
        return self.curve[0][5]

    @property
    def final_loss(self) -> float:
        return self.curve[-1][5]

    def curve_variance(self) -> float:
        """Variance of the total loss over the second half of training."""
        tail = [row[5] for row in self.curve[len(self.curve) // 2:]]
        return float(np.var(tail)) if tail else 0.0


def train_synth(run: RunConfig, data: list[Scene]) -> TrainResult:
    if not data:
        raise ConfigError("empty training set")
    if run.batch_size > len(data):
        raise ConfigError(f"batch size {run.batch_size} exceeds dataset size {len(data)}")
    shapes = {s.features.shape[1:] for s in data}
    if len(shapes) != 1:
        raise ConfigError(f"scenes disagree on feature shape: {sorted(shapes)}")
    channels = data[0].features.shape[1]
    model = DeskModel(channels, run.norm, run.head_init, run.seed, run.momentum)
    weights = LossWeights.preset(run.loss_preset)
    opt = OptimState(lr=run.lr)
    ema = EmaState.track(model.params, run.ema_decay)
    result = TrainResult(model, ema)

    rng = np.random.Generator(np.random.PCG64(run.seed))
    per_epoch = len(data) // run.batch_size
    order: list[int] = []
    for step in range(run.steps):
        if step % per_epoch == 0:
            order = rng.permutation(len(data)).tolist()
        k = step % per_epoch
        batch = [data[i] for i in order[k * run.batch_size:(k + 1) * run.batch_size]]
        x = np.concatenate([s.features for s in batch])
        targets = stack_targets([s.targets for s in batch])
        (lc, ls, lo, total), grads = loss_and_grad(model, x, targets, weights)
        result.curve.append((step // per_epoch, step, lc, ls, lo, total))
        if not math.isfinite(total) or total > 10 * result.initial_loss:
            result.diverged = True
            break
        try:
            adam_step(opt, model.params, grads)
        except DivergenceError:
            result.diverged = True
            break
        ema_update(ema, model.params)
    return result


def loss_curve_csv(result: TrainResult) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["epoch", "step", "center", "scale", "offset", "total"])
    for epoch, step, lc, ls, lo, total in result.curve:
        wr.writerow([epoch, step, *(f"{v:.10g}" for v in (lc, ls, lo, total))])
    return buf.getvalue()


# -- inference on a scene set ---------------------------------------------------------

def predict_scenes(model: DeskModel, scenes: list[Scene], ema: EmaState | None = None):
    """Per-scene prediction maps, in eval mode, using EMA weights when given."""
    x = np.concatenate([s.features for s in scenes])
    if ema is not None:
        with ema_swap_for_eval(ema, model.params):
            maps = model.predict(x)
    else:
        maps = model.predict(x)
    return [tuple(m[i] for m in maps) for i in range(len(scenes))]


def detect(predictions, scenes, enc: EncoderConfig, r: float, apply_nms: bool = True):
    diag = Counter()
    dets = {s.image_id: decode(*p, cfg=enc, r=r, apply_nms=apply_nms, diagnostics=diag)
            for s, p in zip(scenes, predictions)}
    return dets, diag


def scene_mr(predictions, scenes, enc: EncoderConfig, r: float, subsets=STANDARD_SUBSETS) -> dict:
    dets, _ = detect(predictions, scenes, enc, r)
    gts = {s.image_id: s.gts for s in scenes}
    return evaluate(dets, gts, subsets)


def _mr_value(curve) -> str:
    return "undefined" if curve is None else f"{curve.mr:.10g}"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)
    return buf.getvalue()


# -- experiments ---------------------------------------------------------------------

BATCH_GRID = (1, 2, 4, 8, 16)

BATCH_HEADER = ["norm", "devices", "batch_size", "initial_loss", "final_loss", "loss_ratio",
                "curve_var", "diverged", "result", "mr_reasonable", "seed", "config_hash"]


def default_batch_grid(base: RunConfig = RunConfig()) -> list[RunConfig]:
    return [replace(base, norm=norm, batch_size=n) for norm in ("BN", "SN") for n in BATCH_GRID]


def exp_batch_grid(configs, train: list[Scene], evalset: list[Scene],
                   enc: EncoderConfig = EncoderConfig()):
    """One row per run; ``Exp`` marks a diverged cell, ``Con`` a convergent one."""
    rows, results = [], []
    for run in configs:
        res = train_synth(run, train)
        results.append(res)
        if res.diverged:
            mr = "undefined"
        else:
            preds = predict_scenes(res.model, evalset, res.ema)
            mr = _mr_value(scene_mr(preds, evalset, enc, enc.r_infer, [REASONABLE])["Reasonable"])
        rows.append([run.norm, run.devices, run.batch_size,
                     f"{res.initial_loss:.10g}", f"{res.final_loss:.10g}",
                     f"{res.final_loss / res.initial_loss:.10g}",
                     f"{res.curve_variance():.10g}", int(res.diverged),
                     "Exp" if res.diverged else "Con", mr, run.seed, config_hash(run)])
    return _csv(BATCH_HEADER, rows), results


R_VALUES = (0.41, 0.40, 0.36)
SUBSET_COLUMNS = [s.name for s in STANDARD_SUBSETS]
R_HEADER = ["r", "detections_pre_nms", "detections_post_nms"] + SUBSET_COLUMNS + ["config_hash"]


def exp_r_sweep(predictions, scenes: list[Scene], r_values=R_VALUES,
                enc: EncoderConfig = EncoderConfig(), provenance: str = ""):
    rows = []
    gts = {s.image_id: s.gts for s in scenes}
    for r in r_values:
        raw, _ = detect(predictions, scenes, enc, r, apply_nms=False)
        kept, _ = detect(predictions, scenes, enc, r)
        res = evaluate(kept, gts, STANDARD_SUBSETS)
        rows.append([f"{r:g}", sum(map(len, raw.values())), sum(map(len, kept.values())),
                     *(_mr_value(res[name]) for name in SUBSET_COLUMNS), provenance])
    return _csv(R_HEADER, rows)


L1_HEADER = ["loss", "r", "loss_ratio"] + SUBSET_COLUMNS + ["seed", "config_hash"]
PRESET_R = {"smooth": 0.40, "vanilla": 0.36}


def exp_l1_compare(base: RunConfig, train: list[Scene], evalset: list[Scene],
                   presets=("smooth", "vanilla"), enc: EncoderConfig = EncoderConfig()):
    rows, results = [], []
    for preset in presets:
        run = replace(base, loss_preset=preset)
        res = train_synth(run, train)
        results.append(res)
        r = PRESET_R[preset]
        preds = predict_scenes(res.model, evalset, res.ema)
        mrs = scene_mr(preds, evalset, enc, r)
        rows.append([preset, f"{r:g}", f"{res.final_loss / res.initial_loss:.10g}",
                     *(_mr_value(mrs[name]) for name in SUBSET_COLUMNS),
                     run.seed, config_hash(run)])
    return _csv(L1_HEADER, rows), results
