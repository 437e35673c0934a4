from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from scipy.stats import spearmanr

from core.errors import (
    CheckpointError,
    InvalidArgumentError,
    NonFiniteGradientError,
    TrainingDivergedError,
)
from core.models.data import DataMatrix, RngSpec, SubspaceBasis
from core.models.network import DiagonalField, Params, SubspaceNet
from core.schemas.experiment import (
    STREAM_DATA,
    STREAM_DISTILL,
    OffsubspaceTrainConfig,
    SubspaceTrainConfig,
    TrainConfig,
    TrainMode,
)
from core.schemas.osdnet import EmbeddingConfig, NetConfig
from core.schemas.training import (
    CHECKPOINT_FORMAT_VERSION,
    ArrayPayload,
    CheckpointFile,
    CheckpointMetrics,
    HistogramSchema,
    OffNormStats,
    OptimizerStatePayload,
    RngPayload,
)
from core.services.dataset_service import read_input_text, subspace_cube_dataset, svd_decompose
from core.services.dynamics_service import integrate_batch, make_grid, snap_distances
from core.services.export_service import csv_text, map_columns
from core.services.network_service import init_net
from core.services.optimizer_service import AdamWState, adamw_step, clip_grad_norm, sgd_step
from core.services.osdnet_service import (
    LearnedDiagonal,
    NetSubspace,
    OptimalDiagonal,
    OptimalSubspace,
    OSDNetField,
    TrainingBatch,
    draw_batch,
    loss_O_grad,
    loss_O_mc,
    optimal_field,
    tst_loss_s,
    tst_loss_s_grad,
)

logger = logging.getLogger("flowlab.trainer")

# substreams of the run's RngSpec
NOISE_SUBSTREAM = 0
EVAL_SUBSTREAM = 1
INIT_SUBSTREAM = 2
STEP_SUBSTREAM_OFFSET = 3

METRICS_HEADER = ("epoch", "loss", "off_norm_mean", "off_norm_std", "mse")
EPOCH_NOTE = "one optimizer step on a fresh Monte-Carlo batch"

CheckpointHook = Callable[[CheckpointFile], None]


@dataclass
class TrainingRun:
    """Mutable state of one training run.

    Off-subspace runs train the shared κ of ``diagonal`` with ŝ fixed at the optimum;
    subspace runs train ``net`` with Ô fixed at −I/(1−t).
    """

    mode: TrainMode
    data: DataMatrix
    basis: SubspaceBasis
    config: TrainConfig
    rng: RngSpec
    diagonal: DiagonalField | None = None
    net: SubspaceNet | None = None
    epoch: int = 0
    optimizer: AdamWState = field(default_factory=AdamWState)
    initial_loss: float | None = None
    metrics: list[CheckpointMetrics] = field(default_factory=list)
    threads: int = 1
    _noise: np.ndarray | None = field(default=None, repr=False)
    _reference: np.ndarray | None = field(default=None, repr=False)
    _eval_batch: TrainingBatch | None = field(default=None, repr=False)

    @property
    def embedding(self) -> EmbeddingConfig:
        return self.diagonal.embedding if self.mode == "offsubspace" else self.net.embedding

    @property
    def params(self) -> Params:
        return self.diagonal.params() if self.mode == "offsubspace" else self.net.params

    def set_params(self, params: Params) -> None:
        if self.mode == "offsubspace":
            self.diagonal = self.diagonal.with_params(params)
        else:
            self.net = self.net.with_params(params)

    @property
    def noise(self) -> np.ndarray:
        """Frozen starts for checkpoint sample clouds."""
        if self._noise is None:
            generator = self.rng.generator(NOISE_SUBSTREAM)
            self._noise = generator.standard_normal((self.basis.d, self.config.checkpoint_samples))
        return self._noise

    @property
    def eval_batch(self) -> TrainingBatch:
        if self._eval_batch is None:
            self._eval_batch = draw_batch(
                self.data, self.rng, self.config.batch, self.config.epsilon, EVAL_SUBSTREAM
            )
        return self._eval_batch

    @property
    def reference_cloud(self) -> np.ndarray:
        """Optimal-field cloud from the same frozen noise."""
        if self._reference is None:
            self._reference = sample_cloud(self, optimal_field(self.basis))
        return self._reference

    def current_field(self) -> OSDNetField:
        if self.mode == "offsubspace":
            return OSDNetField(self.basis, LearnedDiagonal(self.diagonal), OptimalSubspace.from_basis(self.basis))
        return OSDNetField(self.basis, OptimalDiagonal(), NetSubspace(self.net))


def training_dataset(config: TrainConfig, seed: int) -> tuple[DataMatrix, SubspaceBasis]:
    """N points uniform in the unit cube of the first D coordinates, with their basis."""
    data = subspace_cube_dataset(RngSpec(seed, STREAM_DATA), config.n_points, config.d, config.D)
    return data, svd_decompose(data)


def offsubspace_run(
    data: DataMatrix,
    basis: SubspaceBasis,
    embedding: EmbeddingConfig,
    config: TrainConfig,
    rng: RngSpec,
    kappa0: np.ndarray | None = None,
    threads: int = 1,
) -> TrainingRun:
    if basis.d == basis.D:
        raise InvalidArgumentError("off-subspace training needs d > D")
    kappa = np.zeros(embedding.dim) if kappa0 is None else np.array(kappa0, dtype=np.float64)
    return TrainingRun(
        mode="offsubspace",
        data=data,
        basis=basis,
        config=config,
        rng=rng,
        diagonal=DiagonalField(kappa, embedding),
        threads=threads,
    )


def subspace_run(
    data: DataMatrix,
    basis: SubspaceBasis,
    net_config: NetConfig,
    config: TrainConfig,
    rng: RngSpec,
    net0: SubspaceNet | None = None,
    threads: int = 1,
) -> TrainingRun:
    if net0 is None:
        net = init_net(basis.D, net_config, rng, INIT_SUBSTREAM)
        if isinstance(config, SubspaceTrainConfig) and config.distill_steps:
            net = distill_net(net, data, basis, config, rng)
    else:
        net = net0
    return TrainingRun(
        mode="subspace", data=data, basis=basis, config=config, rng=rng, net=net, threads=threads
    )


def distill_net(
    net: SubspaceNet,
    data: DataMatrix,
    basis: SubspaceBasis,
    config: SubspaceTrainConfig,
    rng: RngSpec,
) -> SubspaceNet:
    """Warm start: regress ``net`` onto ŝ* on the training distribution with AdamW.

    Batches come from a stream of their own, so the epoch batches of the run that
    follows are the same with or without distillation.
    """
    stream = RngSpec(rng.seed, STREAM_DISTILL)
    state = AdamWState()
    loss = math.nan
    for step in range(config.distill_steps):
        batch = draw_batch(data, stream, config.batch, config.epsilon, step)
        loss, grads = tst_loss_s_grad(net, basis, batch)
        grads, _ = clip_grad_norm(grads, config.clip_norm)
        params, state = adamw_step(
            net.params,
            grads,
            state,
            config.distill_learning_rate,
            tuple(config.betas),
            0.0,
            config.adam_eps,
        )
        net = net.with_params(params)
    logger.info("Distilled the subspace network for %d steps (last batch loss %.4g)", config.distill_steps, loss)
    return net


def _objective(run: TrainingRun, batch: TrainingBatch) -> tuple[float, Params]:
    """Batch loss divided by d (a per-coordinate mean) and its gradient."""
    if run.mode == "offsubspace":
        value, grads = loss_O_grad(run.diagonal, run.basis, batch)
    else:
        value, grads = tst_loss_s_grad(run.net, run.basis, batch)
    scale = 1.0 / run.basis.d
    return value * scale, {name: g * scale for name, g in grads.items()}


def evaluate_loss(run: TrainingRun) -> float:
    """Objective on the run's frozen evaluation batch."""
    if run.mode == "offsubspace":
        value, _ = loss_O_mc(run.diagonal, run.basis, run.eval_batch)
    else:
        value, _ = tst_loss_s(run.net, run.basis, run.eval_batch)
    return value / run.basis.d


def sample_cloud(run: TrainingRun, field: OSDNetField | None = None) -> np.ndarray:
    """Terminal states from the frozen noise under ``field`` (default: the run's current field)."""
    cfg = run.config
    grid = make_grid("uniform", cfg.sample_steps, cfg.sample_epsilon)
    field = run.current_field() if field is None else field
    return map_columns(lambda X: integrate_batch(field, X, grid, cfg.sample_method), run.noise, run.threads)


def off_norm_stats(norms: np.ndarray, bins: int) -> OffNormStats:
    counts, edges = np.histogram(norms, bins=bins)
    return OffNormStats(
        mean=float(norms.mean()),
        std=float(norms.std()),
        count=int(norms.size),
        histogram=HistogramSchema(bin_edges=edges.tolist(), counts=counts.tolist()),
    )


def checkpoint_metrics(run: TrainingRun) -> CheckpointMetrics:
    loss = evaluate_loss(run)
    cloud = sample_cloud(run)
    if run.mode == "offsubspace":
        norms = np.linalg.norm(run.basis.project_perp(cloud), axis=0)
        return CheckpointMetrics(
            epoch=run.epoch, loss=loss, off_norms=off_norm_stats(norms, run.config.histogram_bins)
        )
    return CheckpointMetrics(
        epoch=run.epoch,
        loss=loss,
        mse_to_optimal=float(np.mean((cloud - run.reference_cloud) ** 2)),
        nearest_data_distance=float(snap_distances(cloud, run.data).mean()),
    )


def _record_checkpoint(run: TrainingRun, hook: CheckpointHook | None) -> None:
    metrics = checkpoint_metrics(run)
    run.metrics.append(metrics)
    off = f" off-norm mean {metrics.off_norms.mean:.4f}" if metrics.off_norms else ""
    mse = f" mse {metrics.mse_to_optimal:.4g}" if metrics.mse_to_optimal is not None else ""
    logger.info("Checkpoint at epoch %d: loss %.6g%s%s", run.epoch, metrics.loss, off, mse)
    if hook is not None:
        hook(to_checkpoint(run))


def _apply_step(run: TrainingRun, grads: Params) -> None:
    cfg = run.config
    if cfg.optimizer == "sgd":
        run.set_params(sgd_step(run.params, grads, cfg.learning_rate))
        run.optimizer = AdamWState(step=run.optimizer.step + 1)
        return
    params, run.optimizer = adamw_step(
        run.params,
        grads,
        run.optimizer,
        cfg.learning_rate,
        tuple(cfg.betas),
        cfg.weight_decay,
        cfg.adam_eps,
    )
    run.set_params(params)


def run_training(
    run: TrainingRun, epochs: int | None = None, on_checkpoint: CheckpointHook | None = None
) -> list[CheckpointMetrics]:
    """Advance ``run`` to ``epochs`` (default: the configured count).

    Checkpoints are recorded at epoch 0, at every multiple of ``checkpoint_every`` and at
    the final epoch. A rejected step hands the last good state to ``on_checkpoint``
    flagged as aborted and re-raises.
    """
    cfg = run.config
    target = cfg.epochs if epochs is None else epochs
    if target < run.epoch:
        raise InvalidArgumentError("cannot train to an epoch before the current one")
    if run.initial_loss is None:
        run.initial_loss = evaluate_loss(run)
    if not run.metrics:
        _record_checkpoint(run, on_checkpoint)

    while run.epoch < target:
        step = run.epoch + 1
        batch = draw_batch(run.data, run.rng, cfg.batch, cfg.epsilon, STEP_SUBSTREAM_OFFSET + step)
        try:
            loss, grads = _objective(run, batch)
            if not math.isfinite(loss) or loss > cfg.divergence_factor * run.initial_loss:
                raise TrainingDivergedError(
                    f"training diverged at epoch {step}",
                    {
                        "epoch": step,
                        "loss": loss,
                        "initial_loss": run.initial_loss,
                        "last_checkpoint": run.metrics[-1].epoch,
                    },
                )
            grads, norm = clip_grad_norm(grads, cfg.clip_norm)
            _apply_step(run, grads)
        except (NonFiniteGradientError, TrainingDivergedError) as exc:
            logger.error("Step %d rejected: %s", step, exc.message)
            if on_checkpoint is not None:
                on_checkpoint(to_checkpoint(run, aborted=exc.message))
            raise
        run.epoch = step
        logger.debug("epoch %d loss %.6g grad norm %.4g", step, loss, norm)
        if step % cfg.checkpoint_every == 0 or step == target:
            _record_checkpoint(run, on_checkpoint)
    return run.metrics


def train_offsubspace(
    data: DataMatrix,
    basis: SubspaceBasis,
    embedding: EmbeddingConfig,
    config: TrainConfig,
    rng: RngSpec,
    kappa0: np.ndarray | None = None,
    on_checkpoint: CheckpointHook | None = None,
) -> list[CheckpointMetrics]:
    """Train κ on the off-subspace loss with ŝ held at the optimum."""
    run = offsubspace_run(data, basis, embedding, config, rng, kappa0)
    return run_training(run, on_checkpoint=on_checkpoint)


def train_subspace(
    data: DataMatrix,
    basis: SubspaceBasis,
    net_config: NetConfig,
    config: TrainConfig,
    rng: RngSpec,
    net0: SubspaceNet | None = None,
    on_checkpoint: CheckpointHook | None = None,
) -> list[CheckpointMetrics]:
    """Train ŝ on the teacher-student loss with Ô held at −I/(1−t)."""
    run = subspace_run(data, basis, net_config, config, rng, net0)
    return run_training(run, on_checkpoint=on_checkpoint)


def _payload(array: np.ndarray) -> ArrayPayload:
    return ArrayPayload(shape=list(array.shape), data=array.ravel().tolist())


def _array(payload: ArrayPayload) -> np.ndarray:
    return np.asarray(payload.data, dtype=np.float64).reshape(payload.shape)


def to_checkpoint(run: TrainingRun, aborted: str | None = None) -> CheckpointFile:
    cfg = run.config
    optimizer = OptimizerStatePayload(
        kind=cfg.optimizer,
        step=run.optimizer.step,
        first_moment={k: _payload(v) for k, v in run.optimizer.first_moment.items()},
        second_moment={k: _payload(v) for k, v in run.optimizer.second_moment.items()},
    )
    return CheckpointFile(
        format_version=CHECKPOINT_FORMAT_VERSION,
        mode=run.mode,
        epoch=run.epoch,
        rng=RngPayload(seed=run.rng.seed, stream_id=run.rng.stream_id),
        embedding=run.embedding,
        net=run.net.config if run.net is not None else None,
        train=cfg.model_dump(mode="json"),
        params={name: _payload(value) for name, value in run.params.items()},
        optimizer=optimizer,
        initial_loss=run.initial_loss,
        metrics=list(run.metrics),
        aborted=aborted,
    )


def checkpoint_json(checkpoint: CheckpointFile) -> str:
    payload = checkpoint.model_dump(mode="json", by_alias=True)
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(path: str | Path, checkpoint: CheckpointFile) -> Path:
    path = Path(path)
    path.write_text(checkpoint_json(checkpoint), encoding="utf-8")
    logger.info("Checkpoint for epoch %d written to %s", checkpoint.epoch, path)
    return path


def parse_checkpoint(text: str) -> CheckpointFile:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(
            f"checkpoint is not valid JSON at offset {exc.pos}",
            {"offset": exc.pos, "line": exc.lineno, "column": exc.colno, "reason": exc.msg},
        ) from exc
    if not isinstance(raw, dict):
        raise CheckpointError("checkpoint must be a JSON object")
    version = raw.get("formatVersion")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version!r}",
            {"expected": CHECKPOINT_FORMAT_VERSION, "found": version},
        )
    try:
        return CheckpointFile.model_validate(raw)
    except ValidationError as exc:
        raise CheckpointError(
            "checkpoint does not match the expected layout",
            {"errors": [err["msg"] for err in exc.errors()]},
        ) from exc


def load_checkpoint(path: str | Path) -> CheckpointFile:
    return parse_checkpoint(read_input_text(path, "checkpoint", CheckpointError))


def checkpoint_params(checkpoint: CheckpointFile) -> Params:
    return {name: _array(payload) for name, payload in checkpoint.params.items()}


def checkpoint_config(checkpoint: CheckpointFile) -> TrainConfig:
    model = OffsubspaceTrainConfig if checkpoint.mode == "offsubspace" else SubspaceTrainConfig
    try:
        return model.model_validate(checkpoint.train)
    except ValidationError as exc:
        raise CheckpointError("checkpoint carries an invalid train config") from exc


def restore_run(
    checkpoint: CheckpointFile,
    data: DataMatrix | None = None,
    basis: SubspaceBasis | None = None,
    threads: int = 1,
) -> TrainingRun:
    """Rebuild a run from a checkpoint; the dataset is regenerated from the seed when not given."""
    config = checkpoint_config(checkpoint)
    rng = RngSpec(checkpoint.rng.seed, checkpoint.rng.stream_id)
    if data is None or basis is None:
        data, basis = training_dataset(config, rng.seed)
    params = checkpoint_params(checkpoint)
    if checkpoint.mode == "offsubspace":
        run = offsubspace_run(data, basis, checkpoint.embedding, config, rng, threads=threads)
    else:
        if checkpoint.net is None:
            raise CheckpointError("subspace checkpoint is missing the network layout")
        net = SubspaceNet(
            {name: np.zeros(shape) for name, shape in SubspaceNet.shapes(basis.D, checkpoint.net).items()},
            basis.D,
            checkpoint.net,
        )
        run = subspace_run(data, basis, checkpoint.net, config, rng, net0=net, threads=threads)
    try:
        run.set_params(params)
    except (InvalidArgumentError, KeyError) as exc:
        raise CheckpointError(f"checkpoint parameters do not fit: {exc}") from exc
    opt = checkpoint.optimizer
    run.optimizer = AdamWState(
        step=opt.step,
        first_moment={k: _array(v) for k, v in opt.first_moment.items()},
        second_moment={k: _array(v) for k, v in opt.second_moment.items()},
    )
    run.epoch = checkpoint.epoch
    run.initial_loss = checkpoint.initial_loss
    run.metrics = list(checkpoint.metrics)
    return run


def resume_training(
    checkpoint: CheckpointFile,
    epochs: int | None = None,
    on_checkpoint: CheckpointHook | None = None,
    threads: int = 1,
) -> TrainingRun:
    run = restore_run(checkpoint, threads=threads)
    logger.info("Resuming %s training from epoch %d", run.mode, run.epoch)
    run_training(run, epochs, on_checkpoint)
    return run


def metrics_csv(metrics: Sequence[CheckpointMetrics]) -> str:
    rows = [
        (
            m.epoch,
            m.loss,
            m.off_norms.mean if m.off_norms else None,
            m.off_norms.std if m.off_norms else None,
            m.mse_to_optimal,
        )
        for m in metrics
    ]
    return csv_text(METRICS_HEADER, rows)


def histogram_payload(metrics: CheckpointMetrics) -> dict:
    if metrics.off_norms is None:
        raise InvalidArgumentError("checkpoint has no off-subspace norms")
    stats = metrics.off_norms
    return {
        "epoch": metrics.epoch,
        "mean": stats.mean,
        "std": stats.std,
        "count": stats.count,
        "binEdges": stats.histogram.bin_edges,
        "counts": stats.histogram.counts,
    }


def trend_slope(values: Sequence[float]) -> float:
    """Least-squares slope of ``values`` against their index."""
    if len(values) < 2:
        raise InvalidArgumentError("need at least two values")
    return float(np.polyfit(np.arange(len(values)), np.asarray(values, dtype=np.float64), 1)[0])


def rank_correlation(a: Sequence[float], b: Sequence[float]) -> float:
    return float(spearmanr(a, b)[0])


def mse_loss_constant(metrics: Sequence[CheckpointMetrics]) -> tuple[float, float]:
    """C = mse/loss at the first checkpoint and the largest later ratio (mse/loss)/C."""
    ratios = [m.mse_to_optimal / m.loss for m in metrics if m.mse_to_optimal is not None and m.loss > 0]
    if not ratios:
        raise InvalidArgumentError("no checkpoints with both mse and loss")
    C = ratios[0]
    worst = max(ratios) / C if C > 0 else math.inf
    return C, worst
