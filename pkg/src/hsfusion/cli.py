"""Command-line entry point: ``hsfusion {simulate,train,evaluate,calibrate,toyshapes}``.

Exit codes: 0 success, 2 configuration error, 3 data or shape error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_config, validate
from .errors import ConfigError, ContractError, FusionError, NumericError, ShapeError
from .toyshapes import run_toyshapes

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hsfusion", description="Hidden-space multi-modal fusion experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in [("simulate", "generate the synthetic dataset"),
                       ("train", "train generators, selections, classifiers and critic"),
                       ("evaluate", "robustness sweep over noise levels and damaged sensors"),
                       ("calibrate", "calibrate damage-detection thresholds"),
                       ("toyshapes", "shape-to-shape generator study")]:
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", type=Path, help="INI run configuration (defaults when omitted)")
        s.add_argument("--seed", type=int, help="override [run] seed")
        s.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        if name in ("train", "evaluate", "calibrate"):
            s.add_argument("--dataset", type=Path, help="dataset container (default OUT/dataset.hsfc)")
            s.add_argument("--checkpoint", type=Path,
                           help="checkpoint to resume from (train) or to evaluate (default OUT/checkpoint.hsfc)")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config is not None else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    validate(cfg)
    return cfg


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        out = args.out
        if args.command == "simulate":
            print(pipeline.simulate(cfg, out))
        elif args.command == "toyshapes":
            for r in run_toyshapes(cfg, out):
                print(f"{r.source}->{r.target} coverage={r.coverage!r} ring_violation={r.ring_violation!r}")
        else:
            dataset = args.dataset or out / pipeline.DATASET_FILE
            if args.command == "train":
                bundle, _ = pipeline.train(cfg, dataset, out, resume=args.checkpoint)
                print(f"trained {bundle.epoch} epochs; training accuracy {bundle.acc_train}")
            else:
                checkpoint = args.checkpoint or out / pipeline.CHECKPOINT_FILE
                if args.command == "evaluate":
                    rows = pipeline.evaluate(cfg, checkpoint, dataset, out)
                    print(f"{len(rows)} rows written to {out / pipeline.EVAL_CSV}")
                else:
                    _, splits = pipeline.load_data(dataset, cfg)
                    bundle, _, _ = pipeline.load_checkpoint(checkpoint, cfg)
                    pipeline.calibrate(cfg, bundle, splits["train"], out)
                    print(out / pipeline.CALIB_CSV)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, ContractError, FusionError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
