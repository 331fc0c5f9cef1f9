# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""
Decode hand kinematics from EEG/EMG trials, gate them with the copilot filter
and replay them on a 7-joint arm.

Any configuration value can be overridden with ``--<section>.<key> <value>``,
e.g. ``--train.epochs 5`` or ``--copilot.thresholds.HOLDING 0.6``.
"""

import argparse
import logging
import sys
from typing import Any, List, Tuple

from kinedecode import pipeline
from kinedecode.config import RunConfig, parse_overrides
from kinedecode.copilot.rules import RuleTableError
from kinedecode.dataset import IngestError
from kinedecode.model import ConfigError

log = logging.getLogger("kinedecode.cli")

COMMANDS = ("generate", "preprocess", "train", "decode", "filter", "evaluate", "export-arm",
            "sweep")


def get_parser():
    """Return the cmdline parser"""
    parser = argparse.ArgumentParser(prog="kinedecode", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", dest="config", type=str, required=False, default=None,
                        help="Run configuration (JSON); built-in defaults if omitted")
    parser.add_argument("--verbose", dest="debug", action="store_const", required=False,
                        const=True, default=False,
                        help="Verbose/debug output")

    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    gen = sub.add_parser("generate", help="Write a synthetic grasp-and-lift dataset")
    gen.add_argument("--trials", dest="trials", type=int, default=20,
                     help="Number of trials")
    gen.add_argument("--seed", dest="seed", type=int, default=None,
                     help="Dataset seed (default: the run seed)")
    gen.add_argument("--subjects", dest="subjects", type=int, default=1,
                     help="Number of simulated subjects")
    pre = sub.add_parser("preprocess", help="Filter, reference and resample every trial")
    pre.add_argument("--antialias", dest="antialias", action="store_true", default=False,
                     help="Low-pass EMG before decimation (same as --preprocess.antialias true)")
    sub.add_parser("train", help="Train the decoder, state classifier and critic")
    sub.add_parser("decode", help="Decode the test trials")
    sub.add_parser("filter", help="Run the copilot filter on decoded points")
    sub.add_parser("evaluate", help="PCC and RMSE of decoded points")
    arm = sub.add_parser("export-arm", help="Convert a decoded trial into joint angles")
    arm.add_argument("--trial", dest="trial", type=int, default=None,
                     help="Test trial to export (default: kinematics.trial, else the first)")
    sub.add_parser("sweep", help="Retrain across the window and delay grids")
    return parser


def collect_overrides(args, extra: List[str]) -> List[Tuple[str, Any]]:
    """Dotted overrides from the unparsed arguments plus the flag aliases."""
    overrides = parse_overrides(extra)
    if getattr(args, "antialias", False):
        overrides.append(("preprocess.antialias", True))
    return overrides


def run(command: str, config: RunConfig, args) -> str:
    if command == "generate":
        return pipeline.run_generate(config, args.trials, args.seed, args.subjects)
    if command == "export-arm":
        return pipeline.run_export_arm(config, args.trial)
    stage = {
        "preprocess": pipeline.run_preprocess,
        "train": pipeline.run_train,
        "decode": pipeline.run_decode,
        "filter": pipeline.run_filter,
        "evaluate": pipeline.run_evaluate,
        "sweep": pipeline.run_sweep,
    }[command]
    return stage(config)


def main(argv=None):
    """Exit code 0 on success, 1 on invalid configuration or input, 2 on a failed stage."""
    parser = get_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.INFO,
                        format="%(levelname)-8s %(name)-34s %(message)s")

    try:
        overrides = collect_overrides(args, extra)
        config = RunConfig.load(args.config) if args.config else RunConfig()
        if overrides:
            config = config.replace(overrides)
        summary = run(args.command, config, args)
    except (ConfigError, RuleTableError, IngestError) as e:
        log.error("Invalid input: %s", e)
        return 1
    except Exception as e:
        log.error("%s failed: %s", args.command, e)
        log.debug("Traceback", exc_info=True)
        return 2

    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
