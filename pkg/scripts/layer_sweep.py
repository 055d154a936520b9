"""Matching precision at 1 m when keypoints come from each descriptor layer's saliency.

    python scripts/layer_sweep.py --pairs 10 --k 256
"""
import argparse

from saliency_kp.config import ExperimentConfig
from saliency_kp.descriptor import init_descriptor
from saliency_kp.detector import load_detector
from saliency_kp.io import write_csv
from saliency_kp.pipeline import LAYERS_HEADER, evaluate_layers, load_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=10)
    ap.add_argument("--k", type=int, default=256)
    ap.add_argument("--checkpoint", help="use this detector's descriptor instead of a fresh one")
    ap.add_argument("--out", default="layers.csv")
    args = ap.parse_args()

    cfg = ExperimentConfig(n_pairs=args.pairs)
    model = (load_detector(args.checkpoint).descriptor if args.checkpoint
             else init_descriptor(cfg.train.descriptor_seed, k=cfg.train.k,
                                  input_gain=cfg.train.descriptor_gain))
    rows = evaluate_layers(model, load_dataset(cfg), args.k, cfg.overlap_radius)
    write_csv(args.out, LAYERS_HEADER, rows)
    for layer, prec, n in rows:
        print(f"layer {layer}: precision@1m {prec:.4f} over {n} keypoints")


if __name__ == "__main__":
    main()
