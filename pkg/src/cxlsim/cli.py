"""Command-line entry point.

Verbs::

    cxlsim run <suite> (--config FILE | --profile NAME) [--seed N]
               [--out DIR] [--format csv|json] [--trace-coherence]
               [--trace-nic]
    cxlsim calibrate-check --profile NAME
    cxlsim list-profiles

Exit codes: 0 success; 1 usage or configuration error; 2 calibration check
failed; 3 simulation fault.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

from cxlsim.config import (PROFILES, SUITES, ConfigError, SimConfig,
                           load_config, profile_config)
from cxlsim.experiments import calibrate_check, emit_report, run_experiment

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CALIBRATION = 2
EXIT_SIM_FAULT = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        # No prefix abbreviation: a typo'd flag must fail, not silently
        # match and launch a long run.
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message: str):  # argparse would exit(2); we reserve 2
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cxlsim", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run one experiment suite")
    run.add_argument("suite", choices=SUITES)
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="config file path")
    src.add_argument("--profile", choices=PROFILES,
                     help="shipped profile with default settings")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory (default from config)")
    run.add_argument("--format", choices=("csv", "json"))
    run.add_argument("--trace-coherence", action="store_true",
                     help="dump coherence message logs next to the report")
    run.add_argument("--trace-nic", action="store_true",
                     help="dump DMA/NIC engine traces next to the report")

    cal = sub.add_parser("calibrate-check",
                         help="compare a profile against the golden table")
    cal.add_argument("--profile", required=True, choices=PROFILES)

    sub.add_parser("list-profiles", help="print the shipped profiles")
    return parser


def _resolve_config(args) -> SimConfig:
    cfg = (load_config(args.config) if args.config
           else profile_config(args.profile))
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must not be negative")
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.format is not None:
        cfg.out_format = args.format
    return cfg


def _cmd_run(args) -> int:
    cfg = _resolve_config(args)
    want_trace = args.trace_coherence or args.trace_nic
    report = run_experiment(args.suite, cfg, trace=want_trace)
    out = Path(cfg.out_dir)
    path = out / f"{args.suite}.{cfg.out_format}"
    emit_report(report, cfg.out_format, path)
    written = [str(path), str(path) + ".raw"]
    for key, text in sorted(report.traces.items()):
        is_coherence = key.endswith(".coherence")
        if (is_coherence and not args.trace_coherence) or (
                not is_coherence and not args.trace_nic):
            continue
        trace_path = out / f"{args.suite}.{key}.trace"
        trace_path.write_text(text)
        written.append(str(trace_path))
    for name in written:
        print(name)
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    result = calibrate_check(profile_config(args.profile))
    print(result.table())
    return EXIT_OK if result.passed else EXIT_CALIBRATION


def _cmd_list_profiles(_args) -> int:
    for name in PROFILES:
        cfg = profile_config(name)
        print(f"{name:<16} {cfg.latency.freq_mhz:>5} MHz  "
              f"primary={cfg.device}")
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"cxlsim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.verb == "run":
            return _cmd_run(args)
        if args.verb == "calibrate-check":
            return _cmd_calibrate(args)
        return _cmd_list_profiles(args)
    except ConfigError as exc:
        print(f"cxlsim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - simulation faults exit 3
        print(f"cxlsim: simulation fault: {exc}", file=sys.stderr)
        return EXIT_SIM_FAULT


if __name__ == "__main__":
    sys.exit(main())
