"""Command line entry point: train, eval, match, gen-data."""

import argparse
import logging
import sys
from pathlib import Path

from . import config
from .datagen import (DEFAULT_JITTER, DIFFICULTY, SynthConfig, WarpConfig, generate_dataset,
                      load_dataset)
from .evaluate import (EvalConfig, compare_coarse_vs_fine, evaluate, format_table, metrics_csv,
                       model_predictor, write_matches_csv)
from .imageio import read_image, read_keypoints
from .model import Tracker
from .render import render_matches
from .trainer import StageId, load_config, run_stage

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".bmp", ".tif", ".tiff")


def gen_data_config(path):
    """Dataset config: SynthConfig / WarpConfig keys plus ``seed``, ``sources``
    (image folder for warped pairs) and ``jitter`` (bool, default jitter)."""
    values = config.read(path)
    seed = int(values.pop("seed", 0))
    sources = values.pop("sources", None)
    jitter = values.pop("jitter", None)
    if "difficulty" in values and values["difficulty"] in DIFFICULTY:
        values["difficulty"] = str(DIFFICULTY[values["difficulty"]])
    if sources and not Path(sources).is_absolute():
        sources = str(Path(path).resolve().parent / sources)
    return values, seed, sources, jitter in ("1", "true", "yes", "on")


def load_sources(folder):
    files = sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images found in {folder}")
    return [read_image(p) for p in files]


def cmd_gen_data(args):
    if args.count < 0:
        raise ValueError("--count must be non-negative")
    values, seed, sources, jitter = gen_data_config(args.config)
    cls = SynthConfig if args.kind == "synth" else WarpConfig
    cfg = config.build(cls, values)
    if jitter:
        cfg.jitter = DEFAULT_JITTER
    imgs = load_sources(sources) if (sources and args.kind == "warp") else None
    man = generate_dataset(args.kind, cfg, args.out, args.count, seed=seed, sources=imgs)
    print(f"wrote {man['count']} {args.kind} pairs to {args.out} (config {man['config_hash']})")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    stage = StageId.parse(args.stage)
    _, reports = run_stage(stage, cfg, resume=args.resume)
    if reports:
        r = reports[-1]
        print(f"{stage.cli_name}: step {r.step} loss {r.cel:.4f} acc {r.acc:.3f} -> {cfg.out}")
    else:
        print(f"{stage.cli_name}: no steps run -> {cfg.out}")
    return 0


def cmd_eval(args):
    cfg = EvalConfig(threshold=args.threshold, coarse_only=args.coarse_only)
    records = load_dataset(args.data)
    model, _ = Tracker.load(args.ckpt)
    if args.coarse_only or model.completed_stage < StageId.FINE:
        metrics = [evaluate(model, args.data, cfg, records=records)]
    else:
        metrics = list(compare_coarse_vs_fine(model, args.data, cfg, records=records))
    sys.stdout.write(format_table(metrics))
    if args.csv:
        metrics_csv(metrics, args.csv)
    if args.render:
        out = Path(args.render)
        out.mkdir(parents=True, exist_ok=True)
        predict = model_predictor(model, cfg)
        for i, rec in enumerate(records):
            k = min(cfg.max_keypoints, len(rec.keypoints1))
            results = predict(rec, rec.keypoints1[:k])
            render_matches(rec, results, out / f"{i:06d}_matches.png")
    return 0


def cmd_match(args):
    model, _ = Tracker.load(args.ckpt)
    img1 = read_image(args.img1)
    img2 = read_image(args.img2)
    kps = read_keypoints(args.kps)
    use_fine = model.completed_stage >= StageId.FINE
    results = model.track(img1, img2, kps, args.threshold, use_fine=use_fine) if len(kps) else []
    write_matches_csv(args.out, kps, results)
    counts = {}
    for r in results:
        counts[r.verdict.name] = counts.get(r.verdict.name, 0) + 1
    print(" ".join(f"{k}={v}" for k, v in sorted(counts.items())) or "no keypoints")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="kptrack", description="Coarse-to-fine keypoint tracker")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one curriculum stage")
    t.add_argument("--stage", required=True, choices=[s.cli_name for s in StageId])
    t.add_argument("--config", required=True)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a generated dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--coarse-only", action="store_true")
    e.add_argument("--render", metavar="DIR")
    e.add_argument("--threshold", type=float, default=0.2)
    e.add_argument("--csv", metavar="PATH", help="also write metrics as CSV")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("match", help="track keypoints between two images")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--img1", required=True)
    m.add_argument("--img2", required=True)
    m.add_argument("--kps", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--threshold", type=float, default=0.2)
    m.set_defaults(func=cmd_match)

    g = sub.add_parser("gen-data", help="generate a synthetic or warped dataset")
    g.add_argument("--kind", required=True, choices=["synth", "warp"])
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--count", required=True, type=int)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"kptrack: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
