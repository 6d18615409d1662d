"""Command-line entry point.

Settings come from a ``key = value`` config file (``--config``) and are
overridden by per-key flags.  Every command writes into a run directory
(``--out``, else ``$CENTERSCALE_RUN_ROOT/<command>-<hash>``) together with a
``manifest.json`` recording the effective configuration.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .codec import CodecError, EncoderConfig, MAP_NAMES, decode, detections_csv, encode
from .evaluator import (EvalError, annotations_csv, curves_csv, evaluate, format_table,
                        load_annotations, load_detections, report_csv)
from .gradcheck import TOLERANCE, run_suite
from .harness import (ConfigError, RunConfig, SceneConfig, config_hash,
                      default_batch_grid, exp_batch_grid, exp_l1_compare, exp_r_sweep,
                      generate_dataset, loss_curve_csv, predict_scenes, train_synth)
from .switchnorm import NormError, SnLayer, load_layer, save_layer, weight_report
from .switchnorm import report_csv as norm_report_csv
from .tensor import TensorError, load_tensor, save_checkpoint, save_tensor

RUN_ROOT_ENV = "CENTERSCALE_RUN_ROOT"

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2


@dataclass(frozen=True)
class DataConfig:
    train_count: int = 16
    eval_count: int = 16
    data_seed: int = 1
    eval_seed: int = 2
    r: float = 0.40


SECTIONS = (("scene", SceneConfig), ("run", RunConfig), ("data", DataConfig))


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    try:
        return type(default)(value)
    except ValueError:
        raise UsageError(f"cannot read {value!r} as {type(default).__name__}") from None


def build_configs(args) -> dict:
    raw = read_config(args.config) if args.config else {}
    for _, cls in SECTIONS:
        for f in fields(cls):
            v = getattr(args, f.name, None)
            if v is not None:
                raw[f.name] = v
    known = {f.name for _, cls in SECTIONS for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for section, cls in SECTIONS:
        base = cls()
        kw = {f.name: _coerce(str(raw[f.name]), getattr(base, f.name))
              for f in fields(cls) if f.name in raw}
        out[section] = replace(base, **kw)
    return out


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    seen = set()
    for _, cls in SECTIONS:
        for f in fields(cls):
            if f.name in seen:
                continue
            seen.add(f.name)
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                           metavar=type(f.default).__name__.upper())


def _run_dir(args, command: str, configs: dict) -> Path:
    if args.out:
        d = Path(args.out)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        tag = "-".join(config_hash(c) for c in configs.values())[:12] if configs else "default"
        d = root / f"{command}-{tag}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _manifest(run_dir: Path, command: str, configs: dict, extra=None) -> None:
    doc = {
        "command": command,
        "config": {k: asdict(v) for k, v in configs.items()},
        "config_hash": {k: config_hash(v) for k, v in configs.items()},
        "seed": configs["run"].seed if "run" in configs else None,
        "versions": {"centerscale": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    if extra:
        doc.update(extra)
    (run_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


# -- commands -------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    worst = run_suite(range(args.seeds))
    for name, err in worst.items():
        print(f"{name:<22}{err:.3e}")
    top = max(worst.values())
    print(f"max relative error: {top:.3e}")
    return EXIT_OK if top < TOLERANCE else EXIT_INVALID


def cmd_gen(args) -> int:
    cfg = build_configs(args)
    scene, data = cfg["scene"], cfg["data"]
    d = _run_dir(args, "gen", cfg)
    scenes = generate_dataset(scene, data.train_count, data.data_seed)
    (d / "features").mkdir(exist_ok=True)
    for s in scenes:
        save_tensor(d / "features" / f"{s.image_id}.bin", s.features)
    _write(d / "annotations.csv", annotations_csv({s.image_id: s.gts for s in scenes}))
    short = sum(s.shortfall for s in scenes)
    if short:
        print(f"warning: {short} pedestrians could not be placed", file=sys.stderr)
    _manifest(d, "gen", cfg, {"shortfall": short})
    print(f"wrote {len(scenes)} scenes to {d}")
    return EXIT_OK


def cmd_encode(args) -> int:
    enc = EncoderConfig(stride=args.stride)
    gts = load_annotations(args.annotations)
    d = _run_dir(args, "encode", {})
    (d / "targets").mkdir(exist_ok=True)
    for image_id, boxes in gts.items():
        t = encode(boxes, args.height, args.width, enc)
        stack = np.stack([np.asarray(getattr(t, n), dtype=np.float64) for n in MAP_NAMES])
        save_tensor(d / "targets" / f"{image_id}.bin", stack[None])
    print(f"encoded {len(gts)} images to {d / 'targets'} (channels: {', '.join(MAP_NAMES)})")
    return EXIT_OK


def cmd_decode(args) -> int:
    enc = EncoderConfig(stride=args.stride)
    per_image = {}
    for path in sorted(Path(args.maps).glob("*.bin")):
        t = load_tensor(path)
        if t.shape[:2] != (1, 4):
            raise UsageError(f"{path}: expected a (1, 4, h, w) map stack")
        per_image[path.stem] = decode(*t[0], cfg=enc, r=args.r)
    d = _run_dir(args, "decode", {})
    _write(d / "detections.csv", detections_csv(per_image))
    print(f"decoded {sum(map(len, per_image.values()))} detections from "
          f"{len(per_image)} images to {d / 'detections.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gts = load_annotations(args.annotations)
    dets = load_detections(args.detections, gts)
    results = evaluate(dets, gts)
    print(format_table(results))
    if args.out or os.environ.get(RUN_ROOT_ENV):
        d = _run_dir(args, "eval", {})
        _write(d / "report.csv", report_csv(results))
        _write(d / "curves.csv", curves_csv(results))
    return EXIT_OK


def _datasets(cfg):
    scene, data = cfg["scene"], cfg["data"]
    train = generate_dataset(scene, data.train_count, data.data_seed, "train")
    evalset = generate_dataset(scene, data.eval_count, data.eval_seed, "eval")
    return train, evalset


def cmd_train(args) -> int:
    cfg = build_configs(args)
    train, _ = _datasets(cfg)
    res = train_synth(cfg["run"], train)
    d = _run_dir(args, "train", cfg)
    _write(d / "loss_curve.csv", loss_curve_csv(res))
    save_checkpoint(d / "checkpoint.zip", {k: np.asarray(v) for k, v in res.model.params.items()})
    save_checkpoint(d / "ema.zip", res.ema.shadow)
    if isinstance(res.model.layer, SnLayer):
        save_layer(d / "sn_layer.zip", res.model.layer)
    _manifest(d, "train", cfg, {"diverged": res.diverged, "steps_run": len(res.curve)})
    print(f"initial loss {res.initial_loss:.6g}  final loss {res.final_loss:.6g}  "
          f"ratio {res.final_loss / res.initial_loss:.4g}  diverged {res.diverged}")
    if res.diverged and args.strict:
        return EXIT_DIVERGED
    return EXIT_OK


def _parse_list(text, kind):
    return [kind(v) for v in text.split(",") if v.strip()]


def cmd_exp_batch(args) -> int:
    cfg = build_configs(args)
    train, evalset = _datasets(cfg)
    grid = [c for c in default_batch_grid(cfg["run"])
            if c.norm in _parse_list(args.norms, str)
            and c.batch_size in _parse_list(args.batch_sizes, int)]
    if any(c.batch_size > len(train) for c in grid):
        raise UsageError(f"batch sizes must not exceed train_count={len(train)}")
    enc = cfg["scene"].encoder(r_infer=cfg["data"].r)
    text, results = exp_batch_grid(grid, train, evalset, enc)
    d = _run_dir(args, "exp-batch", cfg)
    _write(d / "batch_grid.csv", text)
    _manifest(d, "exp-batch", cfg)
    print(text, end="")
    if args.strict and any(r.diverged for r in results):
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_exp_r(args) -> int:
    cfg = build_configs(args)
    train, evalset = _datasets(cfg)
    if args.crowd_eval:
        crowd = replace(cfg["scene"], crowd=True)
        evalset = generate_dataset(crowd, cfg["data"].eval_count, cfg["data"].eval_seed, "crowd")
    res = train_synth(cfg["run"], train)
    if res.diverged:
        print("training diverged", file=sys.stderr)
        return EXIT_DIVERGED if args.strict else EXIT_OK
    preds = predict_scenes(res.model, evalset, res.ema)
    r_values = _parse_list(args.r_values, float)
    text = exp_r_sweep(preds, evalset, r_values, cfg["scene"].encoder(),
                       provenance=config_hash(cfg["run"]))
    d = _run_dir(args, "exp-r", cfg)
    _write(d / "r_sweep.csv", text)
    _manifest(d, "exp-r", cfg)
    print(text, end="")
    return EXIT_OK


def cmd_exp_l1(args) -> int:
    cfg = build_configs(args)
    train, evalset = _datasets(cfg)
    text, results = exp_l1_compare(cfg["run"], train, evalset, enc=cfg["scene"].encoder())
    d = _run_dir(args, "exp-l1", cfg)
    _write(d / "l1_compare.csv", text)
    _manifest(d, "exp-l1", cfg)
    print(text, end="")
    if args.strict and any(r.diverged for r in results):
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_norm_report(args) -> int:
    layers = []
    for item in args.layers:
        label, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"expected LABEL=PATH, got {item!r}")
        layers.append((label, load_layer(path)))
    text = norm_report_csv(weight_report(layers))
    if args.out:
        d = _run_dir(args, "norm-report", {})
        _write(d / "norm_report.csv", text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> Parser:
    p = Parser(prog="centerscale", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=Parser)

    def add(name, fn, help, config=False):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        sp.add_argument("--out", help="run directory")
        if config:
            _add_config_flags(sp)
            sp.add_argument("--strict", action="store_true", help="exit 2 on divergence")
        return sp

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of all gradients")
    sp.add_argument("--seeds", type=int, default=5)

    add("gen", cmd_gen, "generate a synthetic scene set", config=True)

    sp = add("encode", cmd_encode, "encode annotations into target maps")
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--height", type=int, required=True)
    sp.add_argument("--width", type=int, required=True)
    sp.add_argument("--stride", type=int, default=4)

    sp = add("decode", cmd_decode, "decode prediction maps into detections")
    sp.add_argument("--maps", required=True, help="directory of (1,4,h,w) tensor files")
    sp.add_argument("--r", type=float, default=0.40)
    sp.add_argument("--stride", type=int, default=4)

    sp = add("eval", cmd_eval, "log-average miss rate on four subsets")
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--detections", required=True)

    add("train", cmd_train, "train the desk-scale model", config=True)

    sp = add("exp-batch", cmd_exp_batch, "BN/SN batch-size grid", config=True)
    sp.add_argument("--norms", default="BN,SN")
    sp.add_argument("--batch-sizes", default="1,2,4,8,16")

    sp = add("exp-r", cmd_exp_r, "compressed-width ratio sweep", config=True)
    sp.add_argument("--r-values", default="0.41,0.40,0.36")
    sp.add_argument("--crowd-eval", action="store_true", help="evaluate on crowded scenes")

    add("exp-l1", cmd_exp_l1, "smooth vs vanilla L1 scale loss", config=True)

    sp = add("norm-report", cmd_norm_report, "SN mixing-weight proportions per part")
    sp.add_argument("layers", nargs="+", metavar="LABEL=PATH")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    args = parser.parse_args(argv)
    if not getattr(args, "fn", None):
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    try:
        return args.fn(args)
    except (UsageError, ConfigError, EvalError, CodecError, NormError, TensorError,
            FileNotFoundError) as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
