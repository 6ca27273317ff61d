"""Command-line entry point: ``csds <subcommand> ...``.

Every failure exits nonzero after printing a single line to stderr::

    error: <ExceptionType> key=<dotted.key> <message>

(``key=`` only appears for configuration errors.)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import augment, imaging, metrics, segnet, trainer
from .config import RunConfig, load_config, tomllib
from .data import SynthConfig, generate_corpus, load_dir, make_splits, save_sample, write_manifest
from .errors import ConfigError, CSDSError
from .ndcore import Rng, softmax_array
from .uncertainty import UncertaintySettings, csds_uncertainty, entropy_map

log = logging.getLogger("csds")

CURVE_HEADER = ["config", "epoch", "model", "n_folds", "dice_mean", "jaccard_mean", "loss_total_mean"]
EVAL_HEADER = ["id", "dice", "jaccard"]


def _parse_set(items: list[str]) -> dict:
    """``sec.key=value`` pairs, values parsed as TOML scalars or arrays (bare words become strings)."""
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value", key=item)
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        out[key.strip()] = value
    return out


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = _parse_set(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = args.seed
    if getattr(args, "fold", None) is not None:
        overrides["run.fold"] = args.fold
    return cfg.replace(**overrides) if overrides else cfg


def _read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def _write_rgb(image: np.ndarray, path: Path) -> None:
    rgb = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(path)


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    sc = SynthConfig(size=args.size, seed=args.seed)
    out = Path(args.out)
    samples = generate_corpus(sc, args.num)
    for s in samples:
        save_sample(s, out)
    splits = make_splits([s.id for s in samples], args.seed, args.labeled_ratio)
    write_manifest(splits, out / "splits.json")
    (out / "synth.json").write_text(json.dumps(asdict(sc), indent=2))
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    result = trainer.fit(cfg, out_dir=out)
    print(f"best={result.best_model} epoch={result.best_epoch} "
          f"test_dice={result.test_dice:.2f} test_jaccard={result.test_jaccard:.2f} out={out}")
    return 0


def cmd_eval(args) -> int:
    state = segnet.load_checkpoint(args.checkpoint)
    samples = load_dir(args.data, args.resize_to)
    if not samples:
        raise CSDSError(f"no labeled images under {args.data}")
    rows = []
    for s in samples:
        pred = segnet.predict(state, s.image[None])[0] == 1
        gt = s.mask[0] == 1
        rows.append({"id": s.id, "dice": f"{metrics.dice_score(pred, gt):.6f}",
                     "jaccard": f"{metrics.jaccard_score(pred, gt):.6f}"})
    d = metrics.aggregate(float(r["dice"]) for r in rows)
    j = metrics.aggregate(float(r["jaccard"]) for r in rows)
    if args.out:
        _write_csv(Path(args.out), EVAL_HEADER, rows)
    print(f"n={len(rows)} dice={d} jaccard={j}")
    return 0


def cmd_uncertainty(args) -> int:
    cfg = _run_config(args)
    state = segnet.load_checkpoint(args.checkpoint)
    image = _read_rgb(args.image)
    u = cfg.uncertainty
    settings = UncertaintySettings(u.tau_color, u.tau_structure, u.lambda_color, u.lambda_structure,
                                   u.smoothing, u.eps)
    logits = segnet.forward(state, image[None], train_mode=False).data[0]
    base = entropy_map(softmax_array(logits, axis=0), u.eps)
    color, structure = csds_uncertainty(logits, image, settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # one shared scale so the three maps are comparable (and identical when both lambdas are 0)
    top = max(float(m.values.max()) for m in (base, color, structure))
    lines = ["map min max mean"]
    for name, m in (("base", base), ("color", color), ("structure", structure)):
        v = m.values
        Image.fromarray(imaging.map_to_uint8(v, top), "L").save(out / f"{name}.png")
        lines.append(f"{name} {v.min():.6g} {v.max():.6g} {v.mean():.6g}")
    (out / "stats.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote uncertainty maps to {out}")
    return 0


def cmd_augment_preview(args) -> int:
    cfg = _run_config(args)
    image = _read_rgb(args.image)
    reference = _read_rgb(args.reference) if args.reference else image
    rng = Rng(args.seed)
    a = cfg.augment
    cview = augment.color_view(image, reference, rng.split(0), trainer.jitter_ranges(cfg))
    sview = augment.structure_view(image, rng.split(1), a.elastic_alpha, a.elastic_sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rgb(image, out / "original.png")
    _write_rgb(cview.view, out / "color.png")
    _write_rgb(sview.view, out / "structure.png")
    field = sview.params
    lines = [f"seed {args.seed}", f"color.kind {cview.kind}"]
    if cview.kind == "color_jitter":
        lines += [f"color.{k} {v:.6g}" for k, v in asdict(cview.params).items()]
    lines += [f"structure.alpha {field.alpha:.6g}", f"structure.sigma {field.sigma:.6g}",
              f"structure.max_displacement {float(np.max(np.hypot(field.dx, field.dy))):.6g}"]
    (out / "params.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote augmentation preview to {out}")
    return 0


def cmd_report(args) -> int:
    finals, curves = [], defaultdict(list)
    for path in args.metrics:
        for r in metrics.read_csv(path):
            name = args.config_name or r["run_id"]
            if r["split"] == "test":
                finals.append({"config": name, "dice": r["dice"], "jaccard": r["jaccard"]})
            elif r["split"] == "val":
                curves[(name, int(r["epoch"]), r["model"])].append(r)
    if not finals:
        raise CSDSError("no test rows found in the given metrics files")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = metrics.aggregate_folds(finals)
    metrics.write_report(table, out / "report.csv")
    curve_rows = []
    for (name, epoch, model) in sorted(curves):
        rs = curves[(name, epoch, model)]
        curve_rows.append({
            "config": name, "epoch": epoch, "model": model, "n_folds": len(rs),
            "dice_mean": f"{metrics.aggregate(float(r['dice']) for r in rs).mean:.6f}",
            "jaccard_mean": f"{metrics.aggregate(float(r['jaccard']) for r in rs).mean:.6f}",
            "loss_total_mean": f"{metrics.aggregate(float(r['loss_total']) for r in rs).mean:.6f}",
        })
    _write_csv(out / "curves.csv", CURVE_HEADER, curve_rows)
    for row in table:
        print(f"{row['config']}: dice {row['dice']} jaccard {row['jaccard']} (n={row['n_folds']})")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csds", description="Color-structure dual-student segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="TOML run configuration (defaults when omitted)")
        sp.add_argument("--set", action="append", metavar="SEC.KEY=VALUE", help="override one config key")

    g = sub.add_parser("gen-data", help="render a synthetic PNG corpus and split manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, default=60)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--labeled-ratio", type=float, default=0.10)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one fold and write metrics.csv plus checkpoints")
    with_config(t)
    t.add_argument("--seed", type=int)
    t.add_argument("--fold", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a directory of images and masks")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--resize-to", type=int, default=None)
    e.add_argument("--out", help="per-image CSV")
    e.set_defaults(func=cmd_eval)

    u = sub.add_parser("uncertainty", help="dump base, color and structure uncertainty maps")
    with_config(u)
    u.add_argument("--checkpoint", required=True)
    u.add_argument("--image", required=True)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_uncertainty)

    a = sub.add_parser("augment-preview", help="write color and structure views of one image")
    with_config(a)
    a.add_argument("--image", required=True)
    a.add_argument("--reference", help="histogram-matching reference (defaults to the image itself)")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_augment_preview)

    r = sub.add_parser("report", help="aggregate fold metrics into mean ± std rows and curves")
    r.add_argument("metrics", nargs="+", help="metrics.csv files")
    r.add_argument("--out", required=True)
    r.add_argument("--config-name", help="group every file under this name instead of its run_id")
    r.set_defaults(func=cmd_report)
    return p


def _error_line(exc: BaseException) -> str:
    key = getattr(exc, "key", None)
    msg = " ".join(str(exc).split())
    return f"error: {type(exc).__name__}" + (f" key={key}" if key else "") + f" {msg}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CSDSError, OSError, ValueError, KeyError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
