"""Center/scale/offset target encoding and box decoding.

Maps live at ``stride`` resolution.  A pedestrian centred at input pixel
(cx, cy) owns map cell (floor(cx/s), floor(cy/s)) - column first, as an
(x, y) pair - and the array index is ``[row, col] = [y, x]``.

Decoding reconstructs width from height with a fixed ratio ``r``; ratios
below the annotation aspect ratio shrink boxes so that NMS suppresses
fewer neighbours in crowds.
"""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    stride: int = 4
    r_train: float = 0.41
    gaussian_divisor: float = 4.0
    score_threshold: float = 0.01
    nms_iou: float = 0.5
    r_infer: float = 0.40

    def __post_init__(self):
        if self.stride < 1:
            raise CodecError("stride must be >= 1")
        if not 0 < self.r_infer <= self.r_train:
            raise CodecError("need 0 < r_infer <= r_train")
        if self.gaussian_divisor <= 0:
            raise CodecError("gaussian_divisor must be positive")
        if not 0 < self.score_threshold < 1 or not 0 < self.nms_iou < 1:
            raise CodecError("score_threshold and nms_iou must lie in (0, 1)")


@dataclass
class GtBox:
    x: float
    y: float
    w: float
    h: float
    visibility: float = 1.0
    ignore: bool = False

    def __post_init__(self):
        if not self.ignore and (self.w <= 0 or self.h <= 0):
            raise CodecError(f"non-ignore box needs positive extents, got w={self.w} h={self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2


@dataclass
class DetBox:
    x: float
    y: float
    w: float
    h: float
    score: float

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2


@dataclass
class TargetMaps:
    center: np.ndarray
    gauss_mask: np.ndarray
    scale: np.ndarray
    offset_x: np.ndarray
    offset_y: np.ndarray
    pos_mask: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.center.shape

    @property
    def num_positives(self) -> int:
        return int(self.pos_mask.sum())


MAP_NAMES = tuple(f.name for f in fields(TargetMaps))


def stack_targets(targets) -> TargetMaps:
    """Stack per-image maps along a new leading batch axis."""
    return TargetMaps(**{n: np.stack([getattr(t, n) for t in targets]) for n in MAP_NAMES})


def _gaussian_window(gt: GtBox, col: int, row: int, s: int, divisor: float, mh: int, mw: int):
    x1 = max(int(math.floor(gt.x / s)), 0)
    y1 = max(int(math.floor(gt.y / s)), 0)
    x2 = min(int(math.ceil((gt.x + gt.w) / s)), mw)
    y2 = min(int(math.ceil((gt.y + gt.h) / s)), mh)
    # the positive cell always belongs to the window
    x1, y1 = min(x1, col), min(y1, row)
    x2, y2 = max(x2, col + 1), max(y2, row + 1)
    sig_w = (gt.w / s) / divisor
    sig_h = (gt.h / s) / divisor
    xs = np.arange(x1, x2) - col
    ys = np.arange(y1, y2) - row
    g = np.exp(-(ys[:, None] ** 2) / (2 * sig_h ** 2) - (xs[None, :] ** 2) / (2 * sig_w ** 2))
    return (slice(y1, y2), slice(x1, x2)), g


def gaussian_for(gt: GtBox, input_h: int, input_w: int, cfg: EncoderConfig = EncoderConfig()) -> np.ndarray:
    """Single-box Gaussian mask on the full map (zero outside the box footprint)."""
    s = cfg.stride
    mh, mw = input_h // s, input_w // s
    out = np.zeros((mh, mw))
    cx, cy = gt.center
    col, row = int(math.floor(cx / s)), int(math.floor(cy / s))
    win, g = _gaussian_window(gt, col, row, s, cfg.gaussian_divisor, mh, mw)
    out[win] = g
    return out


def encode(gts, input_h: int, input_w: int, cfg: EncoderConfig = EncoderConfig()) -> TargetMaps:
    s = cfg.stride
    if input_h % s or input_w % s:
        raise CodecError("shape/stride mismatch")
    mh, mw = input_h // s, input_w // s
    center = np.zeros((mh, mw))
    gauss = np.zeros((mh, mw))
    scale = np.zeros((mh, mw))
    ox = np.zeros((mh, mw))
    oy = np.zeros((mh, mw))
    for gt in gts:
        if gt.ignore:
            continue
        cx, cy = gt.center
        fx, fy = cx / s, cy / s
        col, row = int(math.floor(fx)), int(math.floor(fy))
        if not (0 <= col < mw and 0 <= row < mh):
            raise CodecError(f"box center ({cx}, {cy}) lies outside the {input_w}x{input_h} image")
        win, g = _gaussian_window(gt, col, row, s, cfg.gaussian_divisor, mh, mw)
        np.maximum(gauss[win], g, out=gauss[win])
        center[row, col] = 1.0
        scale[row, col] = math.log(gt.h / s)
        ox[row, col] = fx - col
        oy[row, col] = fy - row
    pos = center > 0
    gauss[pos] = 1.0
    return TargetMaps(center=center, gauss_mask=gauss, scale=scale,
                      offset_x=ox, offset_y=oy, pos_mask=pos)


def iou(a, b) -> float:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.w * a.h + b.w * b.h - inter)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two lists of boxes, vectorized."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([[p.x, p.y, p.w, p.h] for p in a], dtype=np.float64)
    B = np.array([[q.x, q.y, q.w, q.h] for q in b], dtype=np.float64)
    ix = (np.minimum(A[:, None, 0] + A[:, None, 2], B[None, :, 0] + B[None, :, 2])
          - np.maximum(A[:, None, 0], B[None, :, 0]))
    iy = (np.minimum(A[:, None, 1] + A[:, None, 3], B[None, :, 1] + B[None, :, 3])
          - np.maximum(A[:, None, 1], B[None, :, 1]))
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = (A[:, 2] * A[:, 3])[:, None] + (B[:, 2] * B[:, 3])[None, :] - inter
    return inter / union


def nms(boxes, threshold: float):
    """Greedy NMS.  Equal scores keep input order; IoU >= threshold suppresses."""
    if not 0 < threshold < 1:
        raise CodecError("NMS threshold must lie in (0, 1)")
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    ranked = [boxes[i] for i in order]
    ious = iou_matrix(ranked, ranked)
    alive = np.ones(len(ranked), dtype=bool)
    keep = []
    for i in range(len(ranked)):
        if not alive[i]:
            continue
        keep.append(ranked[i])
        alive[i + 1:] &= ious[i, i + 1:] < threshold
    return keep


def decode(center_pred, scale_pred, offset_x_pred, offset_y_pred,
           cfg: EncoderConfig = EncoderConfig(), r: float | None = None,
           apply_nms: bool = True, diagnostics: Counter | None = None):
    """Turn prediction maps into boxes with ``w = r * h``.

    Pixels whose scale prediction is not finite are skipped and tallied
    under ``diagnostics["nonfinite_scale"]`` when a counter is passed.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in
            (center_pred, scale_pred, offset_x_pred, offset_y_pred)]
    if len({m.shape for m in maps}) != 1 or maps[0].ndim != 2:
        raise CodecError("prediction maps must be 2-D and share one shape")
    center, scale, ox, oy = maps
    r = cfg.r_infer if r is None else r
    s = cfg.stride
    rows, cols = np.nonzero(center >= cfg.score_threshold)
    boxes = []
    for j, i in zip(rows.tolist(), cols.tolist()):
        t = scale[j, i]
        h = s * math.exp(t) if math.isfinite(t) else math.nan
        if not math.isfinite(h) or h <= 0:
            if diagnostics is not None:
                diagnostics["nonfinite_scale"] += 1
            continue
        w = r * h
        cx = (i + ox[j, i]) * s
        cy = (j + oy[j, i]) * s
        boxes.append(DetBox(cx - w / 2, cy - h / 2, w, h, float(center[j, i])))
    if apply_nms:
        return nms(boxes, cfg.nms_iou)
    return sorted(boxes, key=lambda b: -b.score)


def perfect_predictions(targets: TargetMaps):
    """Prediction maps that reproduce the targets exactly."""
    return targets.center, targets.scale, targets.offset_x, targets.offset_y


# -- detections file ----------------------------------------------------------

DET_FIELDS = ["image_id", "x", "y", "w", "h", "score"]


def detections_csv(per_image: dict) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(DET_FIELDS)
    for image_id, dets in per_image.items():
        for d in dets:
            wr.writerow([image_id, *(repr(float(v)) for v in (d.x, d.y, d.w, d.h, d.score))])
    return buf.getvalue()


def write_detections(path, per_image: dict) -> None:
    Path(path).write_text(detections_csv(per_image))
