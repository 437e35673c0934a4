from __future__ import annotations

import argparse
import logging

import numpy as np

from apps.cli.context import RunContext, positive_int
from core.errors import EXIT_OK
from core.models.data import DataMatrix, RngSpec
from core.models.schedule import OTSchedule, PathSchedule, VPSchedule
from core.models.trajectory import TIE, TimeGrid, Trajectory
from core.schemas.experiment import STREAM_DATA, STREAM_STARTS, PathsConfig
from core.services import dataset_service, dynamics_service, path_service
from core.services.export_service import Figure, map_columns

logger = logging.getLogger("flowlab.cli.gen_paths")

STARTS_SUBSTREAM = 0
SNAPSHOT_SUBSTREAM = 1


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "gen-paths",
        parents=[common],
        help="integrate generation paths of the optimal field and snap their endpoints",
    )
    parser.add_argument(
        "--steps", type=positive_int, help="override dynamics.steps (1 takes a single Euler step)"
    )
    parser.set_defaults(handler=run)


def schedule_for(cfg: PathsConfig) -> PathSchedule:
    return VPSchedule(beta0=cfg.beta0) if cfg.schedule == "vp" else OTSchedule()


def run(args: argparse.Namespace, ctx: RunContext) -> int:
    ctx.override("dynamics.steps", args.steps)
    cfg = ctx.config.dynamics
    steps = cfg.steps
    method = "euler" if steps == 1 else cfg.method
    data = dataset_service.build_dataset(ctx.config.data, RngSpec(ctx.seed, STREAM_DATA))
    schedule = schedule_for(ctx.config.paths)
    field = path_service.OptimalField(data, schedule)
    grid = dynamics_service.make_grid(cfg.grid, steps, cfg.epsilon)
    starts = ctx.rng(STREAM_STARTS)

    X0 = dataset_service.sample_standard_gaussian(starts, data.d, cfg.trajectories, STARTS_SUBSTREAM)
    states = map_columns(
        lambda X: dynamics_service.integrate_batch_states(field, X, grid, method), X0, ctx.threads
    )
    terminal = states[-1]
    snapped = dynamics_service.snap_endpoints(terminal, data, cfg.snap_tol)
    distances = dynamics_service.snap_distances(terminal, data)
    residuals = dynamics_service.limit_residuals(terminal, data, cfg.epsilon, schedule)

    ctx.out.text("data.csv", dataset_service.dataset_to_csv(data))
    for b in range(X0.shape[1]):
        trajectory = Trajectory(grid.nodes, states[:, :, b].T)
        ctx.out.text(f"trajectories/traj_{b:04d}.csv", dynamics_service.trajectory_csv(trajectory))
    header = (
        ["trajectory"]
        + [f"start{i}" for i in range(data.d)]
        + [f"end{i}" for i in range(data.d)]
        + ["snapped_index", "snap_distance", "limit_residual"]
    )
    rows = [
        [b, *X0[:, b], *terminal[:, b], int(snapped[b]), distances[b], residuals[b]]
        for b in range(X0.shape[1])
    ]
    ctx.out.csv("endpoints.csv", header, rows)
    ties = int(np.count_nonzero(snapped == TIE))
    logger.info(
        "%d trajectories, %d steps (%s): %d ties, max snap distance %.3g",
        X0.shape[1],
        steps,
        method,
        ties,
        float(distances.max()),
    )

    if ctx.config.data.mode == "hierarchical":
        _write_snapshots(ctx, data, field, grid, method, starts)

    if ctx.svg:
        figure = Figure("Generation paths", "x0", "x1")
        for b in range(min(X0.shape[1], 64)):
            figure.line(f"path {b}" if b == 0 else "", states[:, 0, b], states[:, min(1, data.d - 1), b])
        figure.scatter("data", data.points[0], data.points[min(1, data.d - 1)])
        ctx.out.svg("paths.svg", figure)
    return EXIT_OK


def _write_snapshots(
    ctx: RunContext,
    data: DataMatrix,
    field: path_service.OptimalField,
    grid: TimeGrid,
    method: str,
    starts: RngSpec,
) -> None:
    """Intermediate clouds at the configured times, labelled by the cluster their endpoint snaps to."""
    cfg = ctx.config.dynamics
    indices = sorted({dynamics_service.nearest_node(grid, t) for t in cfg.snapshot_times} | {grid.steps})
    X0 = dataset_service.sample_standard_gaussian(starts, data.d, cfg.snapshot_samples, SNAPSHOT_SUBSTREAM)
    recorded = map_columns(
        lambda X: dynamics_service.integrate_batch_states(field, X, grid, method, indices), X0, ctx.threads
    )
    snapped = dynamics_service.snap_endpoints(recorded[-1], data, cfg.snap_tol)
    labels = dataset_service.cluster_labels(ctx.config.data)
    cluster = np.where(snapped == TIE, TIE, labels[np.maximum(snapped, 0)])
    header = [f"x{i}" for i in range(data.d)] + ["cluster"]
    for t in cfg.snapshot_times:
        cloud = recorded[indices.index(dynamics_service.nearest_node(grid, t))]
        rows = [[*cloud[:, b], int(cluster[b])] for b in range(cloud.shape[1])]
        ctx.out.csv(f"snapshots/t_{t:.2f}.csv", header, rows)
        if ctx.svg:
            figure = Figure(f"t = {t:.2f}", "x0", "x1")
            for c in np.unique(cluster):
                keep = cluster == c
                figure.scatter(f"cluster {c}", cloud[0, keep], cloud[min(1, data.d - 1), keep])
            ctx.out.svg(f"snapshots/t_{t:.2f}.svg", figure)
    logger.info("Wrote %d snapshots of %d samples", len(cfg.snapshot_times), X0.shape[1])
