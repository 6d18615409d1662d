"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed together at the end
of the pytest run (see ``pytest_terminal_summary`` in conftest.py).
"""
import math
import time

import numpy as np
import pytest

from centerscale.cli import main
from centerscale.codec import DetBox, EncoderConfig, GtBox, decode, nms, perfect_predictions
from centerscale.evaluator import REASONABLE, evaluate
from centerscale.gradcheck import run_suite
from centerscale.harness import (DeskModel, SceneConfig, generate_dataset, generate_scene,
                                 predict_scenes, scene_mr, train_synth)
from centerscale.losses import LossWeights, total_loss
from centerscale.switchnorm import BnLayer, SnLayer, bn_forward, in_forward, ln_forward, sn_forward

from conftest import ACCEPTANCE, DESK_CFG, desk_configs


def record(number, ok, detail):
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, ACCEPTANCE[number]


def test_1_gradient_suite():
    t0 = time.perf_counter()
    worst = run_suite(range(5))
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    names = {"sn.x", "bn.x", "loss.center", "loss.scale.smooth", "loss.scale.vanilla",
             "loss.offset"}
    ok = names <= set(worst) and top < 1e-5 and elapsed < 60
    record(1, ok, f"max relative error {top:.2e} over 5 seeds, {len(worst)} gradients, "
                  f"{elapsed:.1f} s")


def test_2_sn_degeneracy():
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.normal(0.3, 2.0, (2, 4, 3, 3))
        gamma, beta = rng.normal(1, 0.3, 4), rng.normal(0, 0.3, 4)
        refs = [in_forward(x, gamma, beta), ln_forward(x, gamma, beta),
                bn_forward(BnLayer(gamma.copy(), beta.copy()), x)[0]]
        for k, ref in enumerate(refs):
            w = tuple(float(i == k) for i in range(3))
            y, _ = sn_forward(SnLayer(gamma=gamma.copy(), beta=beta.copy()), x, "train", (w, w))
            worst = max(worst, float(np.abs(y - ref).max()))
    record(2, worst <= 1e-12, f"max |SN one-hot - IN/LN/BN| = {worst:.1e}")


def test_3_codec_roundtrip():
    cfg = SceneConfig()
    worst_center, worst_height, recovered, total, width_exact = 0.0, 0.0, 0, 0, True
    for seed in range(100):
        scene = generate_scene(cfg, 10_000 + seed)
        preds = perfect_predictions(scene.targets)
        dets = decode(*preds, r=cfg.aspect, apply_nms=False)
        width_exact &= all(d.w == cfg.aspect * d.h for d in dets)
        for gt in scene.gts:
            if gt.ignore:
                continue
            total += 1
            best = min(dets, key=lambda d: math.dist(d.center, gt.center))
            err = math.dist(best.center, gt.center)
            rel_h = abs(best.h - gt.h) / gt.h
            worst_center, worst_height = max(worst_center, err), max(worst_height, rel_h)
            recovered += err < 2.0 and rel_h <= 1e-12
    ok = recovered == total and width_exact
    record(3, ok, f"{recovered}/{total} GTs recovered, center err <= {worst_center:.2e} px, "
                  f"height rel err <= {worst_height:.1e}, w == r*h exact: {width_exact}")


def _brute_nms(boxes, thr):
    def overlap(a, b):
        iw = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
        ih = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
        return iw * ih / (a.w * a.h + b.w * b.h - iw * ih)

    ranked = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    alive = {i: True for i in ranked}
    for pos, i in enumerate(ranked):
        if alive[i]:
            for j in ranked[pos + 1:]:
                if overlap(boxes[i], boxes[j]) >= thr:
                    alive[j] = False
    return [boxes[i] for i in ranked if alive[i]]


def test_4_nms_oracle():
    rng = np.random.default_rng(2024)
    agree = 0
    for _ in range(1000):
        n = int(rng.integers(0, 30))
        boxes = [DetBox(*map(float, rng.uniform(0, 80, 2)), *map(float, rng.uniform(5, 50, 2)),
                        float(rng.choice([0.5, rng.random()]))) for _ in range(n)]
        agree += nms(boxes, 0.5) == _brute_nms(boxes, 0.5)
    record(4, agree == 1000, f"{agree}/1000 random box sets identical to brute force")


def test_5_mr_oracle():
    gts = {"A": [GtBox(0, 0, 20, 60), GtBox(100, 0, 20, 60)],
           "B": [GtBox(0, 0, 20, 60), GtBox(100, 0, 20, 60)]}
    dets = {"A": [DetBox(0, 0, 20, 60, 0.9), DetBox(100, 0, 20, 60, 0.7)],
            "B": [DetBox(300, 0, 20, 60, 0.8), DetBox(0, 0, 20, 60, 0.6),
                  DetBox(500, 0, 20, 60, 0.5)]}
    # curve: (0,.75) (.5,.75) (.5,.5) (.5,.25) (1,.25); seven references fall below fppi 0.5
    manual = 0.75 ** (7 / 9) * 0.25 ** (2 / 9)
    mr = evaluate(dets, gts, [REASONABLE])["Reasonable"].mr
    perfect = {k: [DetBox(g.x, g.y, g.w, g.h, 1.0) for g in v] for k, v in gts.items()}
    mr_perfect = evaluate(perfect, gts, [REASONABLE])["Reasonable"].mr
    mr_empty = evaluate({}, gts, [REASONABLE])["Reasonable"].mr
    ok = abs(mr - manual) <= 1e-12 and mr_perfect == 0.0 and mr_empty == 1.0
    record(5, ok, f"MR {mr:.15f} vs manual {manual:.15f}, perfect {mr_perfect}, "
                  f"empty {mr_empty}")


def test_6_loss_presets():
    smooth = total_loss((1, 1, 1), LossWeights.preset("smooth"))
    vanilla = total_loss((1, 1, 1), LossWeights.preset("vanilla"))
    v = LossWeights.preset("vanilla")
    ok = (smooth == pytest.approx(1.11, abs=1e-15) and vanilla == pytest.approx(0.16, abs=1e-15)
          and (v.lambda_center, v.lambda_scale, v.lambda_offset) == (0.01, 0.05, 0.1))
    record(6, ok, f"smooth {smooth:.15g}, vanilla {vanilla:.15g}")


def test_7_r_sweep():
    cfg = SceneConfig(crowd=True, min_count=6, max_count=12)
    enc = EncoderConfig()
    ordered, totals = 0, {0.41: 0, 0.40: 0, 0.36: 0}
    for seed in range(50):
        preds = perfect_predictions(generate_scene(cfg, 500 + seed).targets)
        counts = {r: len(decode(*preds, cfg=enc, r=r)) for r in totals}
        for r in totals:
            totals[r] += counts[r]
        ordered += counts[0.36] >= counts[0.40] >= counts[0.41]
    record(7, ordered == 50, f"{ordered}/50 scenes ordered; survivors r=0.41/0.40/0.36: "
                             f"{totals[0.41]}/{totals[0.40]}/{totals[0.36]}")


def test_8_end_to_end():
    t0 = time.perf_counter()
    cfg = desk_configs()
    scene, data = cfg["scene"], cfg["data"]
    train = generate_dataset(scene, data.train_count, data.data_seed, "train")
    evalset = generate_dataset(scene, data.eval_count, data.eval_seed, "eval")
    res = train_synth(cfg["run"], train)
    ratio = res.final_loss / res.initial_loss
    preds = predict_scenes(DeskModel(scene.channels, "none", "oracle"), evalset)
    mr = scene_mr(preds, evalset, scene.encoder(), data.r, [REASONABLE])["Reasonable"].mr
    elapsed = time.perf_counter() - t0
    ok = (not res.diverged and len(res.curve) <= 500 and ratio < 0.1 and mr <= 0.05
          and elapsed < 300)
    record(8, ok, f"SN loss ratio {ratio:.2e} after {len(res.curve)} steps, oracle-head "
                  f"Reasonable MR {mr:.3f}, {elapsed:.1f} s")


def test_9_determinism(tmp_path, capsys):
    argv = ["exp-batch", "--config", str(DESK_CFG), "--steps", "100"]
    codes = [main(argv + ["--out", str(tmp_path / name)]) for name in ("a", "b")]
    capsys.readouterr()
    a = (tmp_path / "a" / "batch_grid.csv").read_bytes()
    b = (tmp_path / "b" / "batch_grid.csv").read_bytes()
    ok = codes == [0, 0] and a == b and len(a.splitlines()) == 11
    record(9, ok, f"two exp-batch runs, {len(a.splitlines()) - 1} grid cells each, "
                  f"byte-identical: {a == b}")
