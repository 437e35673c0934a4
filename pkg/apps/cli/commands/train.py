from __future__ import annotations

import argparse
import logging
import math

from apps.cli.context import RunContext, non_negative_int
from core.errors import EXIT_OK
from core.schemas.experiment import STREAM_OFFSUBSPACE, STREAM_SUBSPACE
from core.schemas.training import CheckpointFile
from core.services import osdnet_service, trainer_service
from core.services.export_service import Figure
from core.services.trainer_service import TrainingRun

logger = logging.getLogger("flowlab.cli.train")


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "train",
        parents=[common],
        help="train the diagonal part or the subspace network of an OSDNet",
    )
    parser.add_argument("--mode", choices=("offsubspace", "subspace"), default="offsubspace")
    parser.add_argument(
        "--epochs", type=non_negative_int, help="train up to this epoch instead of the configured count"
    )
    parser.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint file")
    parser.set_defaults(handler=run)


def build_run(args: argparse.Namespace, ctx: RunContext) -> TrainingRun:
    if args.resume is not None:
        checkpoint = trainer_service.load_checkpoint(args.resume)
        if checkpoint.mode != args.mode:
            logger.warning("Checkpoint is a %s run; ignoring --mode %s", checkpoint.mode, args.mode)
        ctx.stream_id = checkpoint.rng.stream_id
        ctx.notes["resumedFrom"] = f"{args.resume} (epoch {checkpoint.epoch})"
        run = trainer_service.restore_run(checkpoint, threads=ctx.threads)
        logger.info("Resuming %s training from epoch %d", run.mode, run.epoch)
        return run

    osdnet = ctx.config.osdnet
    if args.mode == "offsubspace":
        cfg = ctx.config.trainer.offsubspace
        data, basis = trainer_service.training_dataset(cfg, ctx.seed)
        return trainer_service.offsubspace_run(
            data, basis, osdnet.embedding, cfg, ctx.rng(STREAM_OFFSUBSPACE), threads=ctx.threads
        )
    cfg = ctx.config.trainer.subspace
    data, basis = trainer_service.training_dataset(cfg, ctx.seed)
    return trainer_service.subspace_run(
        data, basis, osdnet.net, cfg, ctx.rng(STREAM_SUBSPACE), threads=ctx.threads
    )


def run(args: argparse.Namespace, ctx: RunContext) -> int:
    training = build_run(args, ctx)
    ctx.override(f"trainer.{training.mode}.epochs", args.epochs)
    ctx.notes["epoch"] = trainer_service.EPOCH_NOTE
    ctx.notes["mode"] = training.mode

    def on_checkpoint(checkpoint: CheckpointFile) -> None:
        name = "aborted.json" if checkpoint.aborted else f"epoch_{checkpoint.epoch:06d}.json"
        trainer_service.save_checkpoint(ctx.out.path(f"checkpoints/{name}"), checkpoint)

    try:
        trainer_service.run_training(training, args.epochs, on_checkpoint)
    finally:
        ctx.out.text("metrics.csv", trainer_service.metrics_csv(training.metrics))

    if training.mode == "offsubspace":
        _offsubspace_report(ctx, training)
    else:
        _subspace_report(ctx, training)
    return EXIT_OK


def _offsubspace_report(ctx: RunContext, training: TrainingRun) -> None:
    metrics = [m for m in training.metrics if m.off_norms is not None]
    for m in metrics:
        ctx.out.json(f"histograms/epoch_{m.epoch:06d}.json", trainer_service.histogram_payload(m))

    basis = training.basis
    k = basis.d - basis.D
    q = osdnet_service.compute_quadratic_data(training.embedding, ctx.config.osdnet.panels)
    limit = osdnet_service.offsubspace_limit_factor(q) * osdnet_service.chi_mean(k)
    upper = 1.0 - training.config.sample_epsilon
    current = osdnet_service.predicted_off_norm_mean(training.diagonal, k, ctx.config.osdnet.panels, upper)
    means = [m.off_norms.mean for m in metrics]
    slope = trainer_service.trend_slope(means) if len(means) > 1 else None
    summary = {
        "epochs": training.epoch,
        "offDimension": k,
        "initialOffNormMean": means[0],
        "finalOffNormMean": means[-1],
        "predictedOffNormMean": current,
        "limitOffNormMean": limit,
        "trendSlope": slope,
        "decreasing": None if slope is None else slope < 0,
    }
    ctx.out.json("summary.json", summary)
    logger.info(
        "Off-subspace norm mean %.4f -> %.4f (predicted %.4f, gradient-flow limit %.4g)",
        means[0],
        means[-1],
        current,
        limit,
    )

    if ctx.svg and len(means) > 1:
        figure = Figure("Off-subspace norm of generated samples", "epoch", "mean norm")
        figure.line("mean", [m.epoch for m in metrics], means)
        ctx.out.svg("off_norms.svg", figure)


def _subspace_report(ctx: RunContext, training: TrainingRun) -> None:
    metrics = [m for m in training.metrics if m.mse_to_optimal is not None]
    rows = [(m.epoch, m.loss, m.mse_to_optimal, m.nearest_data_distance) for m in metrics]
    ctx.out.csv("mse_loss.csv", ("epoch", "loss", "mse", "nearest_data_distance"), rows)

    losses = [m.loss for m in metrics]
    mses = [m.mse_to_optimal for m in metrics]
    correlation = trainer_service.rank_correlation(losses, mses) if len(metrics) > 2 else None
    C, worst = trainer_service.mse_loss_constant(metrics)
    summary = {
        "epochs": training.epoch,
        "rankCorrelation": None if correlation is None or math.isnan(correlation) else correlation,
        "mseLossConstant": C,
        "worstRatio": None if math.isinf(worst) else worst,
        "finalLoss": losses[-1],
        "finalMse": mses[-1],
    }
    ctx.out.json("summary.json", summary)
    logger.info("Final loss %.6g, mse to the optimal cloud %.4g (C=%.4g)", losses[-1], mses[-1], C)

    if ctx.svg and len(metrics) > 1:
        figure = Figure("Generation error against training loss", "loss", "mse")
        figure.scatter("checkpoints", losses, mses)
        ctx.out.svg("mse_loss.svg", figure)
