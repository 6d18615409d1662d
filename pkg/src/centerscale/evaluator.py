"""Miss-rate evaluation in the Caltech/CityPersons style.

Detections are matched greedily in score order.  Ground truths outside the
evaluated subset turn into ignore regions, which absorb detections without
counting them either way.  The curve is summarized by the log-average miss
rate over nine FPPI references log-spaced in [1e-2, 1].
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import DetBox, GtBox, iou_matrix

TP, FP, IGNORED = "tp", "fp", "ignore"
MISS_FLOOR = 1e-10
REFERENCE_FPPI = tuple(float(v) for v in 10.0 ** np.arange(-2.0, 0.0001, 0.25))

ANN_FIELDS = ["image_id", "x", "y", "w", "h", "vis_x", "vis_y", "vis_w", "vis_h", "ignore"]
DET_FIELDS = ["image_id", "x", "y", "w", "h", "score"]


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class SubsetSpec:
    name: str
    min_height: float = 50.0
    vis_low: float = 0.0
    vis_high: float = 1.0
    low_inclusive: bool = True
    high_inclusive: bool = True

    def __post_init__(self):
        if self.min_height <= 0:
            raise EvalError("min_height must be positive")
        if not 0 <= self.vis_low <= self.vis_high <= 1:
            raise EvalError("visibility range must lie within [0, 1]")

    def contains(self, gt: GtBox) -> bool:
        v = gt.visibility
        lo_ok = v >= self.vis_low if self.low_inclusive else v > self.vis_low
        hi_ok = v <= self.vis_high if self.high_inclusive else v < self.vis_high
        return gt.h >= self.min_height and lo_ok and hi_ok


REASONABLE = SubsetSpec("Reasonable", 50, 0.65, 1.0)
HEAVY = SubsetSpec("Heavy", 50, 0.2, 0.65)
PARTIAL = SubsetSpec("Partial", 50, 0.65, 0.9, low_inclusive=False)
BARE = SubsetSpec("Bare", 50, 0.9, 1.0, low_inclusive=False)
STANDARD_SUBSETS = (REASONABLE, HEAVY, PARTIAL, BARE)


@dataclass
class EvalCurve:
    points: list            # (fppi, miss_rate), fppi ascending
    ref_miss: list          # miss rate sampled at each REFERENCE_FPPI
    mr_raw: float           # log-average with the 1e-10 floor applied

    @property
    def mr(self) -> float:
        """Log-average miss rate; a fully floored value reports as 0.0."""
        return 0.0 if self.mr_raw <= MISS_FLOOR * (1 + 1e-9) else self.mr_raw


@dataclass
class MatchResult:
    tp: int
    fp: int
    missed: int
    labels: list = field(default_factory=list)   # one of TP/FP/IGNORED per detection


# -- ingestion --------------------------------------------------------------------

def _float(row, key, lineno):
    try:
        return float(row[key])
    except (KeyError, TypeError, ValueError):
        raise EvalError(f"line {lineno}: bad or missing field {key!r}") from None


def _read_rows(text: str, expected: list[str], what: str):
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return []
    missing = [f for f in expected if f not in reader.fieldnames]
    if missing:
        raise EvalError(f"{what}: header lacks fields {missing}")
    return [(i + 2, row) for i, row in enumerate(reader)]


def parse_annotations(text: str) -> dict:
    """``image_id -> [GtBox]`` in first-appearance order.

    A row whose box fields are empty just declares an image without people.
    Visibility is the visible-box area over the full-box area; empty
    visible-box fields mean fully visible.
    """
    out: dict[str, list[GtBox]] = {}
    for lineno, row in _read_rows(text, ANN_FIELDS, "annotations"):
        image_id = (row.get("image_id") or "").strip()
        if not image_id:
            raise EvalError(f"line {lineno}: bad or missing field 'image_id'")
        boxes = out.setdefault(image_id, [])
        if all(not (row.get(k) or "").strip() for k in ("x", "y", "w", "h")):
            continue
        x, y, w, h = (_float(row, k, lineno) for k in ("x", "y", "w", "h"))
        flag = (row.get("ignore") or "0").strip().lower()
        if flag not in ("0", "1", "true", "false"):
            raise EvalError(f"line {lineno}: bad or missing field 'ignore'")
        ignore = flag in ("1", "true")
        if any((row.get(k) or "").strip() for k in ("vis_w", "vis_h")):
            vw, vh = _float(row, "vis_w", lineno), _float(row, "vis_h", lineno)
            vis = min(max(vw * vh / (w * h), 0.0), 1.0) if w * h > 0 else 0.0
        else:
            vis = 1.0
        if not ignore and (w <= 0 or h <= 0):
            raise EvalError(f"line {lineno}: non-ignore box needs positive w and h")
        boxes.append(GtBox(x, y, w, h, vis, ignore))
    return out


def load_annotations(path) -> dict:
    return parse_annotations(Path(path).read_text())


def annotations_csv(per_image: dict) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(ANN_FIELDS)
    for image_id, gts in per_image.items():
        if not gts:
            wr.writerow([image_id] + [""] * 9)
        for g in gts:
            # the visible region is the top part of the box, scaled by visibility
            wr.writerow([image_id, *(repr(float(v)) for v in (g.x, g.y, g.w, g.h)),
                         repr(float(g.x)), repr(float(g.y)), repr(float(g.w)),
                         repr(float(g.h * g.visibility)), int(g.ignore)])
    return buf.getvalue()


def write_annotations(path, per_image: dict) -> None:
    Path(path).write_text(annotations_csv(per_image))


def parse_detections(text: str, image_ids) -> dict:
    known = list(image_ids)
    out: dict[str, list[DetBox]] = {i: [] for i in known}
    for lineno, row in _read_rows(text, DET_FIELDS, "detections"):
        image_id = (row.get("image_id") or "").strip()
        if image_id not in out:
            raise EvalError(f"line {lineno}: unknown image id {image_id!r}")
        x, y, w, h, s = (_float(row, k, lineno) for k in ("x", "y", "w", "h", "score"))
        if w <= 0 or h <= 0:
            raise EvalError(f"line {lineno}: detection needs positive w and h")
        out[image_id].append(DetBox(x, y, w, h, s))
    return out


def load_detections(path, image_ids) -> dict:
    return parse_detections(Path(path).read_text(), image_ids)


# -- matching and the miss-rate curve ------------------------------------------------

def match_image(dets, gts, subset: SubsetSpec | None = None, iou_thresh: float = 0.5) -> MatchResult:
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    dets = [dets[i] for i in order]
    ignore = np.array([g.ignore or (subset is not None and not subset.contains(g)) for g in gts],
                      dtype=bool)
    ious = iou_matrix(dets, gts)
    matched = np.zeros(len(gts), dtype=bool)
    labels = [None] * len(dets)
    tp = fp = 0
    for k, row in enumerate(ious):
        cand = np.where(~ignore & ~matched & (row >= iou_thresh), row, -1.0)
        if cand.size and cand.max() >= 0:
            matched[int(np.argmax(cand))] = True
            labels[order[k]] = TP
            tp += 1
            continue
        if (ignore & (row >= iou_thresh)).any():
            labels[order[k]] = IGNORED
            continue
        labels[order[k]] = FP
        fp += 1
    missed = int((~ignore).sum()) - tp
    return MatchResult(tp, fp, missed, labels)


def log_average_miss_rate(scored_labels, total_gts: int, num_images: int) -> EvalCurve | None:
    """Curve and MR from ``(score, label)`` pairs; ``None`` when there are no GTs.

    Pairs with equal scores keep their given order.
    """
    if num_images < 1:
        raise EvalError("need at least one image")
    if total_gts == 0:
        return None
    ranked = sorted(scored_labels, key=lambda p: -p[0])
    points = []
    tp = fp = 0
    for k, (score, label) in enumerate(ranked):
        if label == TP:
            tp += 1
        elif label == FP:
            fp += 1
        # emit one point per distinct score, after the whole tie group
        if k + 1 == len(ranked) or ranked[k + 1][0] != score:
            points.append((fp / num_images, 1.0 - tp / total_gts))
    if not points:
        ref_miss = [1.0] * len(REFERENCE_FPPI)
    else:
        fppi = np.array([p[0] for p in points])
        miss = np.array([p[1] for p in points])
        # where no point reaches a reference, fall back to the first (highest
        # threshold) point; taking the lowest miss there would let a dropped TP
        # lower the MR
        fallback = miss[0]
        ref_miss = []
        for ref in REFERENCE_FPPI:
            ok = fppi <= ref
            ref_miss.append(float(miss[ok].min()) if ok.any() else float(fallback))
    logs = [math.log(max(m, MISS_FLOOR)) for m in ref_miss]
    return EvalCurve(points=points, ref_miss=ref_miss, mr_raw=math.exp(sum(logs) / len(logs)))


def evaluate(dets_per_image: dict, gts_per_image: dict, subsets=STANDARD_SUBSETS,
             iou_thresh: float = 0.5) -> dict:
    """``subset name -> EvalCurve`` (``None`` where the subset has no GTs)."""
    images = list(gts_per_image)
    extra = [i for i in dets_per_image if i not in gts_per_image]
    if extra:
        raise EvalError(f"detections reference unknown images {extra[:3]}")
    out = {}
    for subset in subsets:
        scored = []
        total = 0
        for image_id in images:
            dets = dets_per_image.get(image_id, [])
            res = match_image(dets, gts_per_image[image_id], subset, iou_thresh)
            total += res.tp + res.missed
            scored.extend((d.score, lab) for d, lab in zip(dets, res.labels))
        out[subset.name] = log_average_miss_rate(scored, total, len(images))
    return out


def _num(v: float) -> str:
    return f"{v:.10g}"


def report_csv(results: dict) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    n = len(REFERENCE_FPPI)
    wr.writerow(["subset", "mr"] + [f"point_fppi_{i}" for i in range(1, n + 1)]
                + [f"point_miss_{i}" for i in range(1, n + 1)])
    for name, curve in results.items():
        if curve is None:
            wr.writerow([name, "undefined"] + [""] * (2 * n))
        else:
            wr.writerow([name, _num(curve.mr)] + [_num(f) for f in REFERENCE_FPPI]
                        + [_num(m) for m in curve.ref_miss])
    return buf.getvalue()


def curves_csv(results: dict) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["subset", "fppi", "miss_rate"])
    for name, curve in results.items():
        if curve is not None:
            for f, m in curve.points:
                wr.writerow([name, _num(f), _num(m)])
    return buf.getvalue()


def format_table(results: dict) -> str:
    """Human-readable one-line-per-subset MR table."""
    lines = [f"{'subset':<12}{'MR':>10}"]
    for name, curve in results.items():
        val = "undefined" if curve is None else f"{100 * curve.mr:.2f}%"
        lines.append(f"{name:<12}{val:>10}")
    return "\n".join(lines)
