"""Pick the final KL weight by holdout PSNR on shortened stage-1 image runs.

    python scripts/lambda_grid.py [--steps 4000] [--values 1e-3 1e-4 1e-5] [--root runs/lambda_grid]

Each run compresses the whole warm-up schedule into ``--steps`` steps, so the
comparison reflects the final weight rather than how far the warm-up got.
"""

import argparse
import json
import logging
import os
from dataclasses import replace

from ddmikit.experiments import image_config
from ddmikit.generate import evaluate
from ddmikit.train import load_dataset, train_stage1


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=4000)
    ap.add_argument("--values", type=float, nargs="+", default=[1e-3, 1e-4, 1e-5])
    ap.add_argument("--root", default="runs/lambda_grid")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    base = image_config()
    data = load_dataset(base)
    results = {}
    for lam in args.values:
        cfg = replace(base, stage1=replace(base.stage1, steps=args.steps, lambda_z=lam,
                                           checkpoint_every=args.steps))
        path = train_stage1(cfg, os.path.join(args.root, f"lambda_{lam:g}"), data=data, evaluate=False)
        results[f"{lam:g}"] = evaluate(path, data=data)["psnr"]
        print(f"lambda_z={lam:g} holdout PSNR {results[f'{lam:g}']:.2f} dB", flush=True)
    with open(os.path.join(args.root, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
