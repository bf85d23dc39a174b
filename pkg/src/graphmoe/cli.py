"""``graphmoe`` command line: train, ablate, sweep, route-inspect, plot-data.

Exit status is 0 on success, 2 for configuration errors and 3 when a run
stops on a non-finite value.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from . import harness
from .config import load_config, resolve
from .errors import CheckpointFormatError, ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer or a comma-separated list, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _values(text):
    out = []
    for item in text.split(","):
        v = yaml.safe_load(item)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise argparse.ArgumentTypeError(f"sweep value {item!r} is not a number")
        out.append(v)
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config; keys not given keep their defaults")
    common.add_argument("--seed", type=_seeds, help="seed or comma-separated seeds (replaces the config's list)")
    common.add_argument("--out", help="output directory (replaces output_dir)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="set a dotted config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="graphmoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train every seed of one config")
    sub.add_parser("ablate", parents=[common], help="full, -Graph, -Poisson and -Normal arms")
    sweep = sub.add_parser("sweep", parents=[common], help="one training per value along an axis")
    sweep.add_argument("--axis", required=True, choices=sorted(harness.SWEEP_KEYS))
    sweep.add_argument("--values", required=True, type=_values, help="comma-separated grid values")
    inspect = sub.add_parser("route-inspect", parents=[common], help="per-token routing dump from a checkpoint")
    inspect.add_argument("--checkpoint", required=True)
    inspect.add_argument("--split", default="val", choices=("train", "val"))
    inspect.add_argument("--limit", type=int, help="first N sequences of the split")
    plot = sub.add_parser("plot-data", parents=[common], help="tidy CSVs from finished run directories")
    plot.add_argument("runs", nargs="+", help="run directories")
    return parser


def _config(args):
    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg["seeds"] = args.seed
    if args.out is not None:
        cfg["output_dir"] = args.out
    return resolve(cfg)


def _echo(cfg):
    print("# resolved config")
    print(yaml.safe_dump(cfg, sort_keys=False).rstrip())


def _status(failed):
    return EXIT_NUMERIC if failed else EXIT_OK


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "route-inspect":
            expected = _config(args) if args.config or args.override else None
            out = args.out or "routes.jsonl"
            info = harness.cmd_route_inspect(args.checkpoint, out, split=args.split, limit=args.limit, expected_config=expected)
            print(json.dumps(info))
            return EXIT_OK
        if args.command == "plot-data":
            paths = harness.cmd_plot_data(args.runs, args.out or "plot_data")
            print(json.dumps(paths, indent=2))
            return EXIT_OK

        cfg = _config(args)
        _echo(cfg)
        if args.command == "train":
            summary = harness.cmd_train(cfg)
            print(json.dumps({k: summary[k] for k in ("accuracy_mean", "accuracy_std", "v_a_std_mean", "failed_seeds")}))
            return _status(summary["failed_seeds"])
        if args.command == "ablate":
            table = harness.cmd_ablate(cfg)
            for row in table:
                print(f"{row['arm']:<11} acc {row['accuracy_mean']} ± {row['accuracy_std']}  v_a std {row['v_a_std_mean']}")
            return _status(any(row["failed_seeds"] for row in table))
        if args.command == "sweep":
            table = harness.cmd_sweep(cfg, args.axis, args.values)
            for row in table:
                print(f"{row['axis']}={row['value']:<6} acc {row['accuracy_mean']}  params {row['trainable_parameters']}")
            return _status(any(row["failed_seeds"] for row in table))
    except (ConfigError, CheckpointFormatError) as exc:
        print(f"graphmoe: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"graphmoe: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    raise AssertionError(f"unhandled command {args.command!r}")


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
