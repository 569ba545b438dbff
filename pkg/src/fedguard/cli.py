"""Command line entry point: ``fedguard run | gradcheck | partition-stats``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import experiment
from .exceptions import ConfigError
from .nn import MODEL_NAMES

log = logging.getLogger("fedguard")


def _progress(event, payload):
    if event == "round_started":
        log.info("[%s] round %d", payload["mode"], payload["round"])
    elif event == "client_finished":
        log.debug("  client %d loss %.4f", payload["client"], payload["loss"])
    elif event == "client_banned":
        log.info("  client %d banned (score %.3f)", payload["client"], payload["score"])


def _load(path):
    try:
        return experiment.load_config(path)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return None


def cmd_run(args):
    cfg = _load(args.config)
    if cfg is None:
        return experiment.EXIT_IO
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed).validate()
    code = experiment.run(cfg, out_dir=args.out, callback=_progress)
    if code == experiment.EXIT_OK:
        print(f"wrote metrics.csv and summary.json to {args.out or cfg.output_dir}")
    return code


def cmd_gradcheck(args):
    return experiment.gradcheck(args.spec, seed=args.seed)[0]


def cmd_partition_stats(args):
    cfg = _load(args.config)
    if cfg is None:
        return experiment.EXIT_IO
    try:
        experiment.partition_stats(cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return experiment.EXIT_IO
    return experiment.EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="fedguard", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run fedavg and/or secure federated averaging")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override master_seed")
    p.add_argument("--out", default=None, help="override output_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--spec", choices=MODEL_NAMES, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("partition-stats", help="per-client sample and label counts")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_partition_stats)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2) if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return experiment.EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
