"""Command-line entry point: ``ddmikit <verb> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigError, preset
from .config import load as load_config
from .data import DataError
from .diffusion import NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _global_flags(p, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="TOML config file (defaults are used when omitted)")
    p.add_argument("--seed", type=int, default=d, help="override the config seed")
    p.add_argument("--out", default=d if suppress else "runs", help="output directory (default: runs)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ddmikit", description="Latent diffusion over basis-field implicit representations.")
    p.add_argument("--version", action="version", version=f"ddmikit {__version__}")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="verb", metavar="verb", parser_class=_Parser)

    def verb(name, help_):
        sp = sub.add_parser(name, help=help_)
        _global_flags(sp, suppress=True)
        return sp

    sp = verb("train-vae", "train the autoencoder (stage 1)")
    sp.add_argument("--preset", choices=("image", "occupancy"), help="start from a named preset instead of --config")
    sp.add_argument("--steps", type=int, help="stop after this many steps (schedule still follows the config)")
    sp.add_argument("--resume", help="continue from a stage-1 checkpoint")

    sp = verb("train-ldm", "train the latent denoiser on a frozen stage-1 checkpoint (stage 2)")
    sp.add_argument("--stage1", help="stage-1 checkpoint (default: <out>/stage1.ckpt)")
    sp.add_argument("--steps", type=int, help="stop after this many steps")
    sp.add_argument("--resume", help="continue from a stage-2 checkpoint")

    sp = verb("sample", "generate images or occupancy grids at any resolution")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--resolution", type=int, default=None, help="output lattice size (default: training resolution)")
    sp.add_argument("--count", type=int, default=4)
    sp.add_argument("--label", type=int, help="class index for conditional sampling")
    sp.add_argument("--guidance", type=float, help="guidance weight w (requires --label)")

    sp = verb("decompose", "render with a single basis-field scale and report FFT band energies")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--keep", type=int, required=True, help="field scale to keep (1 = coarsest)")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--resolution", type=int, default=None)

    sp = verb("eval", "reconstruction PSNR (images) or IoU (occupancy) on a data split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", choices=("holdout", "train"), default="holdout")

    sp = verb("config", "print configuration")
    sp.add_argument("--dump", action="store_true", help="print the effective config as TOML")
    sp.add_argument("--preset", choices=("image", "occupancy"), default=None)
    return p


def _config(args, name=None):
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = preset(name or "image")
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verb is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    out = args.out or "runs"
    if args.verb == "config":
        if not args.dump:
            raise UsageError("config: nothing to do (use --dump)")
        sys.stdout.write(_config(args, args.preset).dumps())
        return EXIT_OK

    from . import generate, train  # heavy imports only when needed

    if args.verb == "train-vae":
        cfg = _config(args, args.preset)
        path = train.train_stage1(cfg, out, resume=args.resume, max_steps=args.steps)
        print(path)
    elif args.verb == "train-ldm":
        import os

        stage1 = args.stage1 or os.path.join(out, train.STAGE1_FILE)
        path = train.train_stage2(stage1, out, resume=args.resume, max_steps=args.steps)
        print(path)
    elif args.verb == "sample":
        if args.guidance is not None and args.label is None:
            raise UsageError("--guidance requires --label")
        if args.count < 1:
            raise UsageError("--count must be positive")
        pipe_rho = args.resolution
        if pipe_rho is None:
            pipe_rho = generate.Pipeline.load(args.ckpt).vae.resolution
        seed = 0 if args.seed is None else args.seed
        for p in generate.generate(args.ckpt, out, pipe_rho, args.count, seed, args.label, args.guidance):
            print(p)
    elif args.verb == "decompose":
        seed = 0 if args.seed is None else args.seed
        rep = generate.decompose(args.ckpt, out, seed, args.keep, args.count, args.resolution)
        print(json.dumps(rep, indent=2))
    elif args.verb == "eval":
        print(json.dumps(generate.evaluate(args.ckpt, args.split)))
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except (UsageError, ConfigError) as exc:
        print(f"ddmikit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"ddmikit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"ddmikit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ddmikit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
