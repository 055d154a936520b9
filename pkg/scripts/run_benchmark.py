"""Train on synthetic pairs, then compare SKD against the baselines.

    python scripts/run_benchmark.py --out results/benchmark --pairs 50
"""
import argparse
import dataclasses
import logging
import os
import time

from saliency_kp.config import ExperimentConfig, dump_config
from saliency_kp.pipeline import run_pipeline, run_training


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/benchmark")
    ap.add_argument("--pairs", type=int, default=50)
    ap.add_argument("--k", type=int, nargs="+", default=[128, 256])
    ap.add_argument("--detectors", nargs="+", default=["skd", "random", "elf3d"])
    ap.add_argument("--epochs", type=int, default=100)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = ExperimentConfig(n_pairs=args.pairs, k_values=args.k, detectors=args.detectors,
                           output_dir=args.out, checkpoint=os.path.join(args.out, "skd.npz"))
    cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    start = time.perf_counter()
    run_training(cfg)
    summary = run_pipeline(cfg)["summary"]
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(dump_config(cfg))

    print(f"{'method':8s} {'K':>5s} {'prec@1m':>8s} {'repeat':>7s} {'success':>8s}")
    for method in cfg.detectors:
        for K in args.k:
            s = summary[method][str(K)]
            print(f"{method:8s} {K:5d} {s['precision_1m']:8.4f} {s['repeatability']:7.4f} "
                  f"{s['success_rate']:8.3f}")
    print(f"done in {time.perf_counter() - start:.0f} s; reports in {args.out}")


if __name__ == "__main__":
    main()
