from __future__ import annotations

import argparse
import logging

import numpy as np

from apps.cli.context import RunContext
from core.errors import EXIT_OK
from core.schemas.osdnet import EmbeddingConfig
from core.services import osdnet_service
from core.services.export_service import Figure

logger = logging.getLogger("flowlab.cli.emb_approx")

CURVE_HEADER = ("window", "t", "abs_limit", "target")
SUMMARY_HEADER = ("scale", "dim", "weighted_error", "zoom_sign_changes", "condition_number", "pseudo_inverse")


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "emb-approx",
        parents=[common],
        help="compare the closed-form limit κᵀemb(t) with 1/(1−t) across embedding scales and sizes",
    )
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, ctx: RunContext) -> int:
    cfg = ctx.config.emb_approx
    full = np.linspace(0.0, cfg.t_max, cfg.grid_points)
    zoom = np.linspace(0.0, cfg.zoom_max, cfg.grid_points)
    summary = []
    curves: dict[tuple[float, int], np.ndarray] = {}
    for dim in cfg.dims:
        for scale in cfg.scales:
            emb_cfg = EmbeddingConfig(scale=scale, wavelength=cfg.wavelength, dim=dim)
            q = osdnet_service.compute_quadratic_data(emb_cfg, cfg.panels)
            values = np.abs(osdnet_service.limit_curve(q, emb_cfg, full))
            zoom_values = np.abs(osdnet_service.limit_curve(q, emb_cfg, zoom))
            rows = [("full", t, v, 1.0 / (1.0 - t)) for t, v in zip(full, values)]
            rows += [("zoom", t, v, 1.0 / (1.0 - t)) for t, v in zip(zoom, zoom_values)]
            ctx.out.csv(f"curves/s{scale:g}_dim{dim}.csv", CURVE_HEADER, rows)

            error = osdnet_service.weighted_limit_error(q, emb_cfg, cfg.error_upper, cfg.panels)
            changes = osdnet_service.sign_changes(zoom_values - 1.0 / (1.0 - zoom))
            cond = osdnet_service.condition_number(q)
            summary.append((scale, dim, error, changes, cond, osdnet_service.needs_pseudo_inverse(q)))
            curves[(scale, dim)] = values
            logger.info("s=%g dim=%d: weighted error %.4g, %d sign changes near 0", scale, dim, error, changes)
    ctx.out.csv("summary.csv", SUMMARY_HEADER, summary)
    fallbacks = sum(1 for row in summary if row[-1])
    if fallbacks:
        ctx.notes["pseudoInverse"] = (
            f"{fallbacks} of {len(summary)} limits used a truncated pseudo-inverse "
            f"(condition number above {osdnet_service.MAX_CONDITION:g})"
        )

    if len(cfg.scales) > 1:
        errors = {(s, d): e for s, d, e, *_ in summary}
        low, high = min(cfg.scales), max(cfg.scales)
        for dim in cfg.dims:
            if errors[(high, dim)] >= errors[(low, dim)]:
                logger.warning("dim=%d: s=%g does not improve on s=%g", dim, high, low)

    if ctx.svg:
        for dim in cfg.dims:
            figure = Figure(f"Limit function, dim = {dim}", "t", "value")
            figure.line("1/(1-t)", full, 1.0 / (1.0 - full))
            for scale in cfg.scales:
                figure.line(f"s = {scale:g}", full, curves[(scale, dim)])
            ctx.out.svg(f"curves/dim{dim}.svg", figure)
    return EXIT_OK
