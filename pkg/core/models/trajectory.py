from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from core.errors import InvalidArgumentError

GridKind = Literal["uniform", "geometric"]

# snapped_index value for an endpoint equidistant (within snap_tol) to two data points
TIE = -1


@dataclass(frozen=True)
class TimeGrid:
    nodes: np.ndarray
    epsilon: float
    kind: GridKind

    def __post_init__(self) -> None:
        nodes = np.array(self.nodes, dtype=np.float64, copy=True)
        if nodes.ndim != 1 or nodes.size < 2:
            raise InvalidArgumentError("time grid needs at least two nodes")
        if nodes[0] != 0.0 or np.any(np.diff(nodes) <= 0):
            raise InvalidArgumentError("time grid must start at 0 and increase strictly")
        if not np.isclose(nodes[-1], 1.0 - self.epsilon, rtol=0.0, atol=1e-15):
            raise InvalidArgumentError("last node must equal 1 − epsilon")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def steps(self) -> int:
        return self.nodes.size - 1

    @property
    def terminal(self) -> float:
        return float(self.nodes[-1])


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    endpoint: np.ndarray | None = None
    snapped_index: int | None = None

    def __post_init__(self) -> None:
        if self.states.ndim != 2 or self.states.shape[1] != self.times.size:
            raise InvalidArgumentError("states must be d×(#nodes)")

    @property
    def d(self) -> int:
        return self.states.shape[0]

    @property
    def terminal_state(self) -> np.ndarray:
        return self.states[:, -1]

    @property
    def is_tie(self) -> bool:
        return self.snapped_index == TIE

    def state_at(self, index: int) -> np.ndarray:
        return self.states[:, index]
