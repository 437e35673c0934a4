from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field, model_validator


class BasisFile(BaseModel):
    """Persisted subspace basis ``{"V": [[..]], "R": [[..]], "D": int}``; matrices row-major."""

    model_config = ConfigDict(extra="forbid")

    V: list[list[float]]
    R: list[list[float]]
    D: int = Field(ge=1)

    @model_validator(mode="after")
    def _check_rank(self) -> BasisFile:
        if any(len(row) != self.D for row in self.V):
            raise ValueError("every row of V must have D entries")
        if len(self.R) != self.D:
            raise ValueError("R must have D rows")
        return self


class GroupFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # one entry per leaf region; each leaf is a list of generator points
    leaves: list[list[list[float]]] = Field(min_length=1)


class HierarchyFile(BaseModel):
    """Persisted hierarchy ``{"S": [[..]], "groups": [{"leaves": [[[..]], ...]}]}``.

    ``S`` and every leaf list their generator points one per row.
    """

    model_config = ConfigDict(extra="forbid")

    S: list[list[float]] = Field(min_length=1)
    groups: list[GroupFile] = Field(min_length=1)
