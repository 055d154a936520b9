"""Command-line interface.

Every top-level ExperimentConfig field has a matching ``--flag``; nested
scene and training settings go through ``--set scene.noise_sigma=0.05``.
Flags override the ``--config`` file, which overrides the defaults.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .config import ExperimentConfig, apply_setting, dump_config, load_config
from .descriptor import describe, init_descriptor
from .detector import load_detector
from .errors import KeypointError
from .io import load_cloud, save_pairs, write_csv
from .pipeline import LAYERS_HEADER, evaluate_layers, load_dataset, run_pipeline, run_training, detect

log = logging.getLogger("saliency_kp")
NESTED = ("scene", "train")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any setting, including scene.* and train.*")
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in NESTED:
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="VALUE",
                       help=f"override {f.name}")


def build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for f in dataclasses.fields(ExperimentConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            apply_setting(cfg, f.name, v)
    for item in args.set:
        if "=" not in item:
            raise KeypointError(f"--set expects KEY=VALUE, got {item!r}")
        apply_setting(cfg, *item.split("=", 1))
    return cfg


def cmd_synth(cfg, args):
    pairs = load_dataset(dataclasses.replace(cfg, source="synthetic"))
    save_pairs(args.out, pairs, fmt=args.format)
    print(f"wrote {len(pairs)} pairs to {args.out}")


def cmd_train(cfg, args):
    _, trace, path = run_training(cfg)
    print(f"checkpoint {path}; final loss {trace['train'][-1]:.6f}" if trace["train"]
          else f"checkpoint {path}")


def cmd_detect(cfg, args):
    cloud = load_cloud(args.input)
    method = cfg.detectors[0]
    det = load_detector(cfg.checkpoint) if method == "skd" else None
    descriptor = det.descriptor if det else init_descriptor(
        cfg.train.descriptor_seed, k=cfg.train.k, input_gain=cfg.train.descriptor_gain)
    K = min(int(cfg.k_values[0]), len(cloud))
    kp = detect(method, cloud, K, cfg, det, descriptor, cfg.seed)
    pts = kp.points(cloud)
    rows = [[int(i), *map(float, p), float(s)] for i, p, s in zip(kp.indices, pts, kp.scores)]
    out = args.out or os.path.join(cfg.output_dir, "keypoints.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    write_csv(out, ["index", "x", "y", "z", "score"], rows)
    if args.descriptors:
        d = describe(descriptor, cloud)[kp.indices]
        write_csv(args.descriptors, ["index"] + [f"f{j}" for j in range(d.shape[1])],
                  [[int(i), *map(float, r)] for i, r in zip(kp.indices, d)])
    print(f"{len(kp)} keypoints -> {out}")


def _metric_cmd(metrics):
    def run(cfg, args):
        res = run_pipeline(cfg, metrics=metrics)
        for name, path in sorted(res["files"].items()):
            print(f"{name}: {path}")
    return run


def cmd_layers(cfg, args):
    det = load_detector(cfg.checkpoint) if cfg.checkpoint else None
    model = det.descriptor if det else init_descriptor(
        cfg.train.descriptor_seed, k=cfg.train.k, input_gain=cfg.train.descriptor_gain)
    rows = evaluate_layers(model, load_dataset(cfg), int(cfg.k_values[0]), cfg.overlap_radius)
    os.makedirs(cfg.output_dir, exist_ok=True)
    out = os.path.join(cfg.output_dir, "layers.csv")
    write_csv(out, LAYERS_HEADER, rows)
    for layer, prec, n in rows:
        print(f"layer {layer}: precision@1m {prec:.4f} ({n} keypoints)")


def cmd_report(cfg, args):
    if args.train_first or not (cfg.checkpoint and os.path.exists(cfg.checkpoint)):
        if "skd" in cfg.detectors:
            _, _, cfg.checkpoint = run_training(cfg)
    res = run_pipeline(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "config.txt"), "w") as fh:
        fh.write(dump_config(cfg))
    for method, by_k in sorted(res["summary"].items()):
        for K, s in sorted(by_k.items(), key=lambda kv: int(kv[0])):
            print(f"{method:7s} K={K:>5s} prec@1m={s.get('precision_1m', float('nan')):.4f} "
                  f"rep={s.get('repeatability', float('nan')):.4f} "
                  f"success={s.get('success_rate', float('nan')):.3f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saliency-kp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "synth": ("write synthetic pairs as scan files plus pairs.txt", cmd_synth),
        "train": ("train the keypoint detector and save a checkpoint", cmd_train),
        "detect": ("detect keypoints in one scan and write them as CSV", cmd_detect),
        "eval-matching": ("matching-score curves", _metric_cmd(("matching",))),
        "eval-repeatability": ("repeatability", _metric_cmd(("repeatability",))),
        "register": ("RANSAC registration statistics", _metric_cmd(("registration",))),
        "layers": ("per-layer saliency matching precision", cmd_layers),
        "report": ("train if needed, then write every metric", cmd_report),
    }
    for name, (help_text, fn) in specs.items():
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        p.set_defaults(func=fn)
        if name == "synth":
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--format", choices=("bin", "ply"), default="bin")
        elif name == "detect":
            p.add_argument("--input", required=True, help=".bin or .ply scan")
            p.add_argument("--out", help="keypoint CSV path")
            p.add_argument("--descriptors", help="optional CSV of keypoint descriptors")
        elif name == "report":
            p.add_argument("--train-first", action="store_true",
                           help="retrain even if the checkpoint exists")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        args.func(cfg, args)
    except (KeypointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
