from __future__ import annotations

import argparse
import logging
import sys

from apps.cli.context import RunContext
from core.errors import EXIT_FAILURE, EXIT_OK
from core.schemas.experiment import STREAM_VERIFY
from core.services import verify_service

logger = logging.getLogger("flowlab.cli.verify")


def module_list(value: str) -> list[str]:
    modules = [name.strip() for name in value.split(",") if name.strip()]
    unknown = sorted(set(modules) - set(verify_service.MODULES))
    if unknown or not modules:
        raise argparse.ArgumentTypeError(
            f"expected a comma-separated subset of {','.join(verify_service.MODULES)}"
        )
    return modules


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "verify",
        parents=[common],
        help="run the numerical invariant checks and write a pass/fail report",
    )
    parser.add_argument("--scale", choices=("quick", "full"), help="sample sizes (default: verify.scale)")
    parser.add_argument(
        "--perturb-optimal",
        dest="perturb_optimal",
        type=float,
        help="add this offset to the optimal subspace field (should make its identity check fail)",
    )
    parser.add_argument("--modules", type=module_list, help="comma-separated modules to check")
    parser.add_argument("--json", action="store_true", help="also print the report as JSON on stdout")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, ctx: RunContext) -> int:
    ctx.override("verify.scale", args.scale)
    ctx.override("verify.perturb_optimal", args.perturb_optimal)
    ctx.override("verify.modules", args.modules)
    cfg = ctx.config.verify
    verify_ctx = verify_service.VerifyContext(
        config=ctx.config,
        scale=cfg.scale,
        perturb=cfg.perturb_optimal,
        threads=ctx.threads,
    )
    ctx.stream_id = STREAM_VERIFY
    report = verify_service.run_verify(verify_ctx, cfg.modules)
    ctx.out.text("verify_report.json", report.model_dump_json(by_alias=True, indent=2) + "\n")
    if args.json:
        sys.stdout.write(report.model_dump_json(by_alias=True) + "\n")

    for failure in report.failures:
        logger.error(
            "%s/%s failed: measured %s, required %s%s",
            failure.module,
            failure.name,
            failure.measured,
            failure.required,
            f" ({failure.detail})" if failure.detail else "",
        )
    return EXIT_OK if report.passed else EXIT_FAILURE
