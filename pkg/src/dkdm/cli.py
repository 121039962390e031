"""Command-line entry point: ``dkdm <subcommand> --config FILE``.

Exit status is 0 on success, 2 for usage or config errors (with a
``file:line:`` anchored message) and 1 for failures while running.
"""

import argparse
import logging
import sys

from dkdm.config import load_config
from dkdm.errors import ConfigError
from dkdm.harness import RUNNERS

log = logging.getLogger("dkdm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"{self.prog}: error: {message}") from None


def build_parser():
    parser = _Parser(prog="dkdm", description="Diffusion teacher training and data-free distillation runs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "train-teacher": "train a denoiser on (procedural) data",
        "distill": "distill a teacher checkpoint into a fresh student without data",
        "synthesize": "write a teacher-generated dataset",
        "sample": "draw samples from a checkpoint and export them",
        "eval": "score a checkpoint's samples against reference data",
        "ablate": "compare distillation strategies or sweep rho",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
    return parser


def run_command(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            if isinstance(exc.code, str):
                print(exc.code, file=sys.stderr)
            return 2
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("dkdm: error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        kind = cfg["run.kind"]
        if kind is not None and kind != args.command:
            line = cfg.lines.get("run.kind")
            raise ConfigError(f"run.kind is {kind!r} but the command is {args.command!r}", line, args.config)
        result = RUNNERS[args.command](cfg)
    except ConfigError as exc:
        print(f"dkdm: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        log.debug("run failed", exc_info=True)
        print(f"dkdm: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command}: wrote {result.out_dir}")
    for name, val in sorted(result.final.items()):
        print(f"  {name} = {val:.6g}")
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
