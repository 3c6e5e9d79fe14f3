"""``voplab`` command line: generate, train, evaluate, count-params, ablate.

Exit codes: 0 success, 2 configuration error, 3 refusing to overwrite existing
output (pass ``--force``), 4 non-finite loss during training.
"""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError
from .corpus import CorpusError, OutputExists
from .experiment import (AXES, ExperimentConfig, load_config, run_ablate, run_count_params,
                         run_evaluate, run_generate, run_train)
from .trainer import NonFiniteLoss

EXIT_OK, EXIT_CONFIG, EXIT_EXISTS, EXIT_NONFINITE = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config (JSON)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--seed", type=int, default=None, help="override corpus and training seed")
    common.add_argument("--out", metavar="DIR", default=None, help="override the output directory")

    p = argparse.ArgumentParser(prog="voplab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic corpus")
    t = sub.add_parser("train", parents=[common], help="train under the configured protocol")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    t.add_argument("--stop-after", type=int, default=None, metavar="STEPS",
                   help="stop after this many global steps")
    e = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    e.add_argument("--checkpoint", required=True, metavar="CKPT")
    e.add_argument("--split", default="val")
    c = sub.add_parser("count-params", parents=[common], help="parameter ledger CSV")
    c.add_argument("--protocols", default=None, help="comma-separated protocol kinds")
    c.add_argument("--csv", metavar="PATH", default=None, help="also write the CSV here")
    a = sub.add_parser("ablate", parents=[common], help="one training run per axis value")
    a.add_argument("--axis", choices=AXES, default=None)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, out=args.out)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.command == "generate":
            out = run_generate(cfg, force=args.force)
            print(f"wrote corpus to {out}")
        elif args.command == "train":
            res = run_train(cfg, force=args.force, resume=args.resume, stop_after=args.stop_after)
            print(f"lr {res.lr:g}; outputs in {res.out}")
            if res.final_val:
                print(" ".join(f"{k}={v:.3f}" for k, v in res.final_val.items()))
        elif args.command == "evaluate":
            metrics = run_evaluate(cfg, args.checkpoint, args.split)
            print(" ".join(f"{k}={v:.3f}" for k, v in metrics.items()))
        elif args.command == "count-params":
            kinds = args.protocols.split(",") if args.protocols else None
            sys.stdout.write(run_count_params(cfg, kinds, args.csv))
        elif args.command == "ablate":
            print(f"wrote {run_ablate(cfg, axis=args.axis, force=args.force)}")
    except OutputExists as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EXISTS
    except NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ConfigError, CorpusError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
