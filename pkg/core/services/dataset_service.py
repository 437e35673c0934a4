from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import ValidationError
from scipy import linalg

from core.errors import DatasetError, FlowlabError, InvalidArgumentError
from core.models.data import DataMatrix, RngSpec, SubspaceBasis
from core.schemas.experiment import DataConfig
from core.schemas.persistence import BasisFile

logger = logging.getLogger("flowlab.dataset")

DatasetFormat = Literal["csv", "json"]


def _infer_format(path: Path, fmt: DatasetFormat | None) -> DatasetFormat:
    if fmt is not None:
        return fmt
    suffix = path.suffix.lower()
    if suffix == ".json":
        return "json"
    if suffix in {".csv", ".txt", ""}:
        return "csv"
    raise DatasetError(f"cannot infer dataset format from suffix {suffix!r}")


def _parse_entry(raw: object, row: int, column: int) -> float:
    if isinstance(raw, bool):
        raise DatasetError("boolean entry in dataset", row, column)
    try:
        value = float(raw)  # type: ignore[arg-type]
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"cannot parse {raw!r} as a real number", row, column) from exc
    if not math.isfinite(value):
        raise DatasetError(f"non-finite entry {raw!r}", row, column)
    return value


def _rows_to_matrix(rows: list[list[object]]) -> DataMatrix:
    if not rows:
        raise DatasetError("dataset is empty")
    width = len(rows[0])
    parsed: list[list[float]] = []
    for r, row in enumerate(rows):
        if len(row) != width:
            raise DatasetError(f"row has {len(row)} entries, expected {width}", r, len(row))
        if width == 0:
            raise DatasetError("dataset rows are empty", r, 0)
        parsed.append([_parse_entry(raw, r, c) for c, raw in enumerate(row)])
    return DataMatrix.from_rows(np.array(parsed, dtype=np.float64))


def parse_csv_dataset(text: str) -> DataMatrix:
    """One point per row, comma separated, no header; blank lines are skipped.

    Row and column numbers in errors are zero-based over the non-blank rows.
    """
    rows = [
        [cell.strip() for cell in row]
        for row in csv.reader(io.StringIO(text))
        if row and any(cell.strip() for cell in row)
    ]
    return _rows_to_matrix(rows)


def parse_json_dataset(text: str) -> DataMatrix:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON at offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(payload, list) or not all(isinstance(row, list) for row in payload):
        raise DatasetError("JSON dataset must be an array of arrays")
    return _rows_to_matrix(payload)


def read_input_text(
    path: str | Path, what: str, error: type[FlowlabError] = DatasetError
) -> str:
    """UTF-8 contents of an input file; unreadable files raise ``error`` (exit code 2)."""
    path = Path(path)
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise error(f"{what} not found: {path}") from exc
    except UnicodeDecodeError as exc:
        raise error(f"{what} is not UTF-8 text (byte {exc.start}): {path}") from exc
    except OSError as exc:
        raise error(f"cannot read {what} {path}: {exc.strerror or exc}") from exc


def load_dataset(path: str | Path, fmt: DatasetFormat | None = None) -> DataMatrix:
    path = Path(path)
    text = read_input_text(path, "dataset file")
    fmt = _infer_format(path, fmt)
    data = parse_csv_dataset(text) if fmt == "csv" else parse_json_dataset(text)
    logger.info("Loaded dataset %s (d=%d, N=%d)", path, data.d, data.N)
    return data


def format_real(value: float) -> str:
    return f"{value:.17g}"


def dataset_to_csv(data: DataMatrix) -> str:
    lines = [",".join(format_real(v) for v in point) for point in data.points.T]
    return "\n".join(lines) + "\n"


def save_dataset(path: str | Path, data: DataMatrix, fmt: DatasetFormat | None = None) -> Path:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        path.write_text(dataset_to_csv(data), encoding="utf-8")
    else:
        path.write_text(json.dumps(data.points.T.tolist()), encoding="utf-8")
    return path


def svd_decompose(data: DataMatrix, rank_tol: float = 1e-10) -> SubspaceBasis:
    """Reduced SVD Y = V·R with D = #{σ > rank_tol·σ_max} and Vperp completing V."""
    if not 0.0 < rank_tol < 1.0:
        raise InvalidArgumentError("rank_tol must lie in (0, 1)")
    U, singular, Wt = linalg.svd(data.points, full_matrices=False)
    if singular[0] == 0.0:
        raise InvalidArgumentError("data matrix is identically zero")
    D = int(np.count_nonzero(singular > rank_tol * singular[0]))
    V = U[:, :D]
    R = singular[:D, None] * Wt[:D]
    Vperp = completion(V)
    logger.debug("SVD rank %d of %d (σ_max=%.3g)", D, data.d, singular[0])
    return SubspaceBasis(V=V, R=R, Vperp=Vperp, rank_tol=rank_tol)


def completion(V: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of range(V)."""
    d, D = V.shape
    if D == d:
        return np.zeros((d, 0))
    return linalg.null_space(V.T)


def sample_standard_gaussian(
    rng: RngSpec, d: int, count: int, substream: int | None = None
) -> np.ndarray:
    if d < 1 or count < 1:
        raise InvalidArgumentError("d and count must be positive")
    return rng.generator(substream).standard_normal((d, count))


def sparse_dataset(
    rng: RngSpec,
    n_points: int,
    d: int = 2,
    box: float = 10.0,
    min_separation: float = 0.0,
    max_draws: int = 100_000,
) -> DataMatrix:
    """Points uniform in [−box, box]ᵈ, redrawn until pairwise distances are ≥ min_separation."""
    generator = rng.generator()
    accepted: list[np.ndarray] = []
    for _ in range(max_draws):
        candidate = generator.uniform(-box, box, size=d)
        if all(np.linalg.norm(candidate - point) >= min_separation for point in accepted):
            accepted.append(candidate)
            if len(accepted) == n_points:
                return DataMatrix(np.stack(accepted, axis=1))
    raise InvalidArgumentError(
        "could not place points with the requested separation",
        {"n_points": n_points, "min_separation": min_separation, "box": box},
    )


def hierarchical_dataset(
    rng: RngSpec, centers: np.ndarray, per_cluster: int = 30, std: float = 0.5
) -> DataMatrix:
    """Gaussian clusters around the rows of ``centers``; columns grouped by cluster."""
    centers = np.asarray(centers, dtype=np.float64)
    noise = rng.generator().standard_normal((centers.shape[0], centers.shape[1], per_cluster))
    clusters = centers[:, :, None] + std * noise
    return DataMatrix(np.concatenate(list(clusters), axis=1))


def subspace_cube_dataset(rng: RngSpec, n_points: int, d: int, D: int) -> DataMatrix:
    """Uniform points in the unit cube [0, 1]ᵈ with the last d − D coordinates zeroed."""
    if not 1 <= D <= d:
        raise InvalidArgumentError("need 1 ≤ D ≤ d")
    points = rng.generator().uniform(0.0, 1.0, size=(d, n_points))
    points[D:] = 0.0
    return DataMatrix(points)


def build_dataset(config: DataConfig, rng: RngSpec) -> DataMatrix:
    if config.mode == "file":
        return load_dataset(config.path, config.format)  # type: ignore[arg-type]
    if config.mode == "sparse":
        data = sparse_dataset(rng, config.n_points, config.d, config.box, config.min_separation)
    elif config.mode == "hierarchical":
        data = hierarchical_dataset(rng, np.array(config.centers), config.cluster_size, config.cluster_std)
    else:
        D = config.subspace_dim if config.subspace_dim is not None else config.d
        data = subspace_cube_dataset(rng, config.n_points, config.d, D)
    logger.info("Generated %s dataset (d=%d, N=%d)", config.mode, data.d, data.N)
    return data


def cluster_labels(config: DataConfig) -> np.ndarray:
    """Cluster index of every column produced by :func:`hierarchical_dataset`."""
    return np.repeat(np.arange(len(config.centers)), config.cluster_size)


def save_basis(path: str | Path, basis: SubspaceBasis) -> Path:
    payload = BasisFile(V=basis.V.tolist(), R=basis.R.tolist(), D=basis.D)
    path = Path(path)
    path.write_text(payload.model_dump_json(), encoding="utf-8")
    return path


def load_basis(path: str | Path) -> SubspaceBasis:
    try:
        payload = BasisFile.model_validate_json(read_input_text(path, "basis file"))
    except ValidationError as exc:
        raise DatasetError(f"invalid basis file: {exc.errors()[0]['msg']}") from exc
    V = np.array(payload.V, dtype=np.float64)
    return SubspaceBasis(V=V, R=np.array(payload.R, dtype=np.float64), Vperp=completion(V))
