from __future__ import annotations

import argparse
import itertools
import logging

from apps.cli.context import RunContext
from core.errors import EXIT_FAILURE, EXIT_OK
from core.models.data import RngSpec
from core.schemas.experiment import STREAM_BOUND_CHECK, STREAM_DATA
from core.services import dataset_service, geometry_service
from core.services.export_service import Figure, parallel_map

logger = logging.getLogger("flowlab.cli.bound_check")

HEADER = ("t", "tau", "bound", "p_hat", "stderr")


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "bound-check",
        parents=[common],
        help="compare the softmax concentration bound with Monte-Carlo estimates",
    )
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, ctx: RunContext) -> int:
    cfg = ctx.config.bound_check
    data = dataset_service.build_dataset(ctx.config.data, RngSpec(ctx.seed, STREAM_DATA))
    # every grid point reads the same chunk substreams (common random numbers)
    rng = ctx.rng(STREAM_BOUND_CHECK)
    M = geometry_service.min_separation(data) if data.N >= 2 else None
    grid = list(itertools.product(cfg.times, cfg.taus))

    def evaluate(point: tuple[float, float]) -> tuple[float, float, float | None, float, float]:
        t, tau = point
        bound = geometry_service.concentration_bound(t, tau, M, data.N) if M is not None else None
        p_hat, stderr = geometry_service.estimate_nonconcentration(t, tau, data, cfg.samples, rng)
        return t, tau, bound, p_hat, stderr

    rows = parallel_map(evaluate, grid, ctx.threads)
    violations = [row for row in rows if row[2] is not None and row[3] - 3.0 * row[4] > row[2]]
    ctx.out.csv("bound_check.csv", HEADER, rows)
    for t, tau, bound, p_hat, stderr in violations:
        logger.error(
            "Bound violated at t=%g, tau=%g: p_hat %.5f ± %.5f exceeds %.5f", t, tau, p_hat, stderr, bound
        )
    logger.info(
        "%d grid points, %d samples each (N=%d, M=%s): %d violation(s)",
        len(rows),
        cfg.samples,
        data.N,
        "n/a" if M is None else f"{M:.4g}",
        len(violations),
    )

    if ctx.svg:
        for tau in cfg.taus:
            selected = [row for row in rows if row[1] == tau]
            figure = Figure(f"Non-concentration probability, tau = {tau:g}", "t", "probability")
            figure.line("p_hat", [r[0] for r in selected], [r[3] for r in selected])
            if M is not None:
                figure.line("bound", [r[0] for r in selected], [min(r[2], 1.0) for r in selected])
            ctx.out.svg(f"bound_check_tau_{tau:g}.svg", figure)
    return EXIT_FAILURE if violations else EXIT_OK
