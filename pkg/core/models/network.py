from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from core.errors import InvalidArgumentError
from core.schemas.osdnet import EmbeddingConfig, NetConfig

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class DiagonalField:
    """Diagonal off-subspace dynamics Ô_t.

    Shared mode: every diagonal entry is ô_t = κᵀemb(t). Per-entry mode:
    ``per_entry`` (k×dim) gives one coefficient row per diagonal entry.
    """

    kappa: np.ndarray
    embedding: EmbeddingConfig
    per_entry: np.ndarray | None = None

    def __post_init__(self) -> None:
        kappa = np.asarray(self.kappa, dtype=np.float64)
        if kappa.shape != (self.embedding.dim,):
            raise InvalidArgumentError("kappa must have one entry per embedding feature")
        if self.per_entry is not None and (
            self.per_entry.ndim != 2 or self.per_entry.shape[1] != self.embedding.dim
        ):
            raise InvalidArgumentError("per_entry must be (d−D)×dim")
        object.__setattr__(self, "kappa", kappa)

    @classmethod
    def zeros(cls, embedding: EmbeddingConfig) -> DiagonalField:
        return cls(np.zeros(embedding.dim), embedding)

    @property
    def shared(self) -> bool:
        return self.per_entry is None

    def params(self) -> Params:
        if self.shared:
            return {"kappa": self.kappa}
        return {"per_entry": self.per_entry}

    def with_params(self, params: Params) -> DiagonalField:
        if "per_entry" in params:
            return DiagonalField(self.kappa, self.embedding, params["per_entry"])
        return DiagonalField(params["kappa"], self.embedding)


@dataclass(frozen=True)
class SubspaceNet:
    """Residual network ŝ: (Vᵀx, emb(t)) ∈ ℝ^{D+dim} → ℝ^D.

    Parameter names: ``input.weight``/``input.bias`` (hidden×(D+dim)),
    ``blocks.{i}.fc1.*`` and ``blocks.{i}.fc2.*`` (hidden×hidden), and
    ``output.weight``/``output.bias`` (D×hidden).
    """

    params: Params
    D: int
    config: NetConfig

    def __post_init__(self) -> None:
        expected = self.shapes(self.D, self.config)
        missing = set(expected) ^ set(self.params)
        if missing:
            raise InvalidArgumentError(
                "network parameters do not match the layout", {"keys": sorted(missing)}
            )
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise InvalidArgumentError(
                    f"parameter {name} has shape {self.params[name].shape}, expected {shape}"
                )

    @staticmethod
    def shapes(D: int, config: NetConfig) -> dict[str, tuple[int, ...]]:
        hidden = config.hidden
        shapes: dict[str, tuple[int, ...]] = {
            "input.weight": (hidden, D + config.embedding.dim),
            "input.bias": (hidden,),
        }
        for i in range(config.blocks):
            shapes[f"blocks.{i}.fc1.weight"] = (hidden, hidden)
            shapes[f"blocks.{i}.fc1.bias"] = (hidden,)
            shapes[f"blocks.{i}.fc2.weight"] = (hidden, hidden)
            shapes[f"blocks.{i}.fc2.bias"] = (hidden,)
        shapes["output.weight"] = (D, hidden)
        shapes["output.bias"] = (D,)
        return shapes

    @property
    def embedding(self) -> EmbeddingConfig:
        return self.config.embedding

    def with_params(self, params: Params) -> SubspaceNet:
        return SubspaceNet(params, self.D, self.config)


@dataclass(frozen=True)
class OSDNetParams:
    """Trainable parameters of an OSDNet: the diagonal field and the subspace net."""

    diagonal: DiagonalField
    net: SubspaceNet


@dataclass(frozen=True)
class QuadraticData:
    """A = ∫(1−t)²emb embᵀ dt, b = ∫(1−t)emb dt, e = ∫emb dt over [0, 1]."""

    A: np.ndarray
    b: np.ndarray
    e: np.ndarray
    panels: int

    def __post_init__(self) -> None:
        A = np.asarray(self.A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != self.b.size:
            raise InvalidArgumentError("A must be dim×dim and match b")
        if np.max(np.abs(A - A.T)) > 1e-12:
            raise InvalidArgumentError("A must be symmetric")
        object.__setattr__(self, "A", 0.5 * (A + A.T))

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.A)[0])
