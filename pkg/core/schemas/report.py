from __future__ import annotations

from typing import Any, Literal

from pydantic import Field

from core.schemas.base import CamelModel


class InvariantResult(CamelModel):
    module: str
    name: str
    passed: bool
    measured: float | None
    required: str
    detail: str | None = None


class VerifyReport(CamelModel):
    passed: bool
    scale: str
    seed: int
    results: list[InvariantResult] = Field(default_factory=list)

    @property
    def failures(self) -> list[InvariantResult]:
        return [result for result in self.results if not result.passed]


class ConfinementReport(CamelModel):
    confined: bool
    level: Literal["group", "leaf"]
    region_index: int | None = None
    out_of_support: bool = False
    start_index: int
    first_violation_index: int | None = None
    first_violation_time: float | None = None
    violation_count: int = 0
    start_distance: float | None = None
    # distance from the state at ``start_index`` to every candidate region
    region_distances: list[float] = Field(default_factory=list)


class RunManifest(CamelModel):
    command: str
    config_digest: str
    seed: int
    stream_id: int = 0
    code_version: str
    threads: int = 1
    outputs: list[str] = Field(default_factory=list)
    # command-line values folded into the digested config, keyed by dotted config path
    overrides: dict[str, Any] = Field(default_factory=dict)
    # e.g. how an epoch is defined for training runs
    notes: dict[str, str] = Field(default_factory=dict)
