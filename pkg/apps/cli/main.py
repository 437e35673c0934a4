from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence

from apps.cli.commands import bound_check, emb_approx, gen_paths, train, verify
from apps.cli.context import RunContext, build_context, non_negative_int, positive_int
from core import __version__
from core.config import Settings
from core.errors import handle_exception
from core.logging_utils import setup_logging

logger = logging.getLogger("flowlab.cli")

COMMANDS = (gen_paths, bound_check, emb_approx, train, verify)


def common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file (defaults reproduce the reference setup)")
    common.add_argument("--out", help="output directory (FLOWLAB_OUT takes precedence)")
    common.add_argument("--svg", action="store_true", help="also render SVG figures")
    common.add_argument("--seed", type=non_negative_int, help="override the configured seed")
    common.add_argument("--threads", type=positive_int, help="worker threads for batched evaluation")
    common.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--debug", action="store_true", help="include exception details in error output")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowlab",
        description="Discrete-target flow matching: optimal fields, generation paths, OSDNet training "
        "and numerical checks of their guarantees.",
    )
    parser.add_argument("--version", action="version", version=f"flowlab {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = common_options()
    for command in COMMANDS:
        command.register(subparsers, common)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = Settings()
    setup_logging(args.log_level or settings.log_level)

    context: RunContext | None = None
    try:
        context = build_context(args, settings)
        exit_code = args.handler(args, context)
    except Exception as exc:
        exit_code = handle_exception(exc, debug=args.debug)
    if context is not None:
        try:
            context.finish()
        except OSError as exc:
            logger.error("Could not write the run manifest: %s", exc)
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
