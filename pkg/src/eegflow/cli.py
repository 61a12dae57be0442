"""Command-line interface: ``eegflow {convert,train,reduce-experiment,visualize}``.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import EegFlowError, ValidationError

log = logging.getLogger("eegflow")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegflow", description="EEG optical-flow pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("convert", "epochs -> flow containers + manifest"),
                       ("train", "joint training, classifier, evaluation"),
                       ("reduce-experiment", "accuracy on shrinking training sets"),
                       ("visualize", "PGM frames, HSV flow images, confusion heatmap")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "visualize":
            p.add_argument("--epoch", type=int, default=0, help="epoch id from manifest.csv")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    over: dict = {}
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}", "config")
        key, value = item.split("=", 1)
        over[key.strip()] = value
    for key in ("seed", "alpha", "out"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    return over


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "convert":
            res = pipeline.convert(cfg)
            print(f"epochs={res.n_epochs} dropped={res.n_dropped} containers={res.n_containers}")
        elif args.command == "train":
            outcome = pipeline.train(cfg)
            print(outcome.report.summary(), end="")
        elif args.command == "reduce-experiment":
            pipeline.reduce_experiment(cfg)
            print((cfg.out_dir / "table.csv").read_text(), end="")
        else:
            print(pipeline.visualize(cfg, args.epoch))
    except EegFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
