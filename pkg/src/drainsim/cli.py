"""Command line: ``drainsim run|list|validate|recover-mapping``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 experiment
failure.  Every file written is printed on its own line.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, mapping_to_text

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


def default_config_path() -> Path:
    return Path(__file__).with_name("default.ini")


def _parse_bits(text: str) -> tuple[int, int]:
    """``LO..HI`` inclusive, e.g. ``6..20``."""
    try:
        lo, hi = (int(x) for x in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO..HI, got {text!r}") from None
    if not 6 <= lo < hi <= 47:
        raise argparse.ArgumentTypeError("bit range must satisfy 6 <= LO < HI <= 47")
    return lo, hi


def _parse_option(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    try:
        import json
        return k, json.loads(v)
    except ValueError:
        return k, v


class _Parser(argparse.ArgumentParser):
    # bad arguments count as invalid input (1); 2 is reserved for failed runs
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drainsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a named experiment")
    r.add_argument("experiment")
    r.add_argument("--config", help="config file (defaults built in)")
    r.add_argument("--seed", type=int)
    r.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
    r.add_argument("--out", default="results")
    r.add_argument("--repetitions", type=int)
    r.add_argument("--full-scale", "--paper-scale", dest="full_scale", action="store_true",
                   help="full-size buffers and request counts (soc.scale=1)")
    r.add_argument("--option", action="append", default=[], type=_parse_option, metavar="KEY=JSON",
                   help="experiment knob, e.g. bits=128 or zero_factors=[1,8]")

    sub.add_parser("list", help="list experiments")

    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("config")
    v.add_argument("--override", action="append", default=[])

    m = sub.add_parser("recover-mapping", help="recover the configured mapping from row-conflict timing")
    m.add_argument("--config")
    m.add_argument("--override", action="append", default=[])
    m.add_argument("--bits", type=_parse_bits, default=(6, 20), metavar="LO..HI")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", help="write the recovered [mapping] section here")
    return p


def _cmd_list() -> int:
    from .harness import EXPERIMENTS
    for e in EXPERIMENTS.values():
        print(f"{e.name:22s} {e.figure}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config, args.override)
    except ConfigError as exc:
        for e in exc.errors:
            print(e, file=sys.stderr)
        return EXIT_INVALID
    print(f"{args.config}: ok (config hash {cfg.fingerprint()})")
    return EXIT_OK


def _cmd_run(args) -> int:
    from .harness import EXPERIMENTS, ExperimentError, ExperimentSpec, run_experiment
    if args.experiment not in EXPERIMENTS:
        print(f"unknown experiment {args.experiment!r}; valid names:", file=sys.stderr)
        for name in EXPERIMENTS:
            print(f"  {name}", file=sys.stderr)
        return EXIT_INVALID
    spec = ExperimentSpec(args.experiment, overrides=args.override, repetitions=args.repetitions,
                          out=args.out, config_path=args.config, seed=args.seed,
                          full_scale=args.full_scale, options=dict(args.option))
    try:
        res = run_experiment(spec)
    except ConfigError as exc:
        for e in exc.errors:
            print(e, file=sys.stderr)
        return EXIT_INVALID
    except ExperimentError as exc:
        print(str(exc), file=sys.stderr)
        print(Path(args.out) / args.experiment / "manifest.json")
        return EXIT_FAILED
    for f in res.files:
        print(f)
    print(res.manifest)
    return EXIT_OK


def _cmd_recover(args) -> int:
    from .addrmap import InsufficientSamples
    from .harness import partition_matches, recover_configured
    try:
        cfg = load_config(args.config, args.override)
    except ConfigError as exc:
        for e in exc.errors:
            print(e, file=sys.stderr)
        return EXIT_INVALID
    lo, hi = args.bits
    truth = cfg.address_mapping()
    try:
        got = recover_configured(truth, lo, hi + 1, args.seed)
    except InsufficientSamples as exc:
        print(f"recovery failed: {exc}", file=sys.stderr)
        if exc.ambiguous_bits:
            print(f"ambiguous bits: {exc.ambiguous_bits}", file=sys.stderr)
        return EXIT_FAILED
    text = mapping_to_text(got)
    print(text, end="")
    print(f"# matches configured partition: {partition_matches(truth, got, args.seed)}")
    if args.out:
        Path(args.out).write_text(text)
        print(args.out)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    np.seterr(all="ignore")
    args = build_parser().parse_args(argv)
    if args.command == "list":
        return _cmd_list()
    if args.command == "validate":
        return _cmd_validate(args)
    if args.command == "run":
        return _cmd_run(args)
    return _cmd_recover(args)


if __name__ == "__main__":
    sys.exit(main())
