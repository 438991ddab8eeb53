"""Train (or resume) every reference run used by the end-to-end checks.

    python scripts/reference_runs.py [--root runs/acceptance] [--only occupancy image baseline ldm]
"""

import argparse
import logging

from ddmikit import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs/acceptance")
    ap.add_argument("--only", nargs="*", choices=("image", "baseline", "occupancy", "ldm"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    for name in args.only or ("occupancy", "image", "baseline", "ldm"):
        path = experiments.ensure_ldm(args.root) if name == "ldm" else experiments.ensure_stage1(args.root, name)
        print(name, path, flush=True)


if __name__ == "__main__":
    main()
