"""Three-node radial feeder physics and the two players' reward functions.

Every quantity is per-unit (already divided by the nominal voltage V0).
The functions accept Python floats or numpy arrays and broadcast.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np


class ConfigError(ValueError):
    """Raised when a parameter set violates its invariants."""


@dataclass(frozen=True)
class ScenarioParams:
    """Physical and game constants of one feeder instance."""

    r1: float = 0.03
    x1: float = 0.03
    r2: float = 0.03
    x2: float = 0.03
    p2_max: float = 1.4
    p2_min: Optional[float] = None  # None -> p2_max - 0.05
    q2_ratio: float = 0.5
    p3: Optional[float] = None  # None -> p3_max
    p3_max: float = 1.0
    epsilon: float = 0.05
    v_min: float = 0.90
    v_max: float = 1.10
    delta_v: float = 0.02
    theta_A: float = 0.07
    n_memory: int = 10
    n_attacker_levels: int = 11
    v1_init: float = 1.0
    q3_init_index: Optional[int] = None  # None -> index of q3 = 0

    def __post_init__(self):
        if self.p2_min is None:
            object.__setattr__(self, "p2_min", round(self.p2_max - 0.05, 12))
        if self.p3 is None:
            object.__setattr__(self, "p3", self.p3_max)
        if self.q3_init_index is None:
            object.__setattr__(self, "q3_init_index", (self.n_attacker_levels - 1) // 2)
        self.validate()

    def validate(self) -> None:
        vals = [getattr(self, f.name) for f in fields(self)]
        if not all(np.isfinite(v) for v in vals):
            raise ConfigError("scenario parameters must be finite")
        if not self.v_min < self.v_max:
            raise ConfigError(f"v_min ({self.v_min}) must be below v_max ({self.v_max})")
        if not self.v_min <= self.v1_init <= self.v_max:
            raise ConfigError("v1_init must lie in [v_min, v_max]")
        if self.p2_min > self.p2_max:
            raise ConfigError("p2_min must not exceed p2_max")
        if self.p3_max < 0:
            raise ConfigError("p3_max must be nonnegative")
        if self.epsilon <= 0 or self.delta_v <= 0:
            raise ConfigError("epsilon and delta_v must be positive")
        if self.theta_A <= self.epsilon:
            raise ConfigError("theta_A must exceed epsilon")
        if self.n_memory < 1:
            raise ConfigError("n_memory must be >= 1")
        n = self.n_attacker_levels
        if n < 3 or n % 2 == 0:
            raise ConfigError("n_attacker_levels must be odd and >= 3")
        if not 0 <= self.q3_init_index < n:
            raise ConfigError("q3_init_index out of range")
        if min(self.r1, self.x1, self.r2, self.x2) < 0:
            raise ConfigError("line impedances must be nonnegative")

    @property
    def q3_step(self) -> float:
        return 2.0 * self.p3_max / (self.n_attacker_levels - 1)

    def q3_settings(self) -> np.ndarray:
        return np.round(-self.p3_max + self.q3_step * np.arange(self.n_attacker_levels), 12) + 0.0

    def with_(self, **changes) -> "ScenarioParams":
        """Copy with changes; derived defaults (p2_min, p3) follow unless given."""
        base = asdict(self)
        if "p2_max" in changes and "p2_min" not in changes:
            base["p2_min"] = None
        if "p3_max" in changes and "p3" not in changes:
            base["p3"] = None
        base.update(changes)
        return ScenarioParams(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FlowSolution:
    P1: np.ndarray | float
    Q1: np.ndarray | float
    P2: np.ndarray | float
    Q2: np.ndarray | float
    V1: np.ndarray | float
    V2: np.ndarray | float
    V3: np.ndarray | float


def solve_flows(v1, p2, q2, p3, q3, params: ScenarioParams) -> FlowSolution:
    """LinDistFlow for the three-node feeder.

    Node 3 injects (p3, q3), node 2 draws (p2, q2), node 1 is the tap.
    """
    P2 = -p3
    Q2 = -q3
    P1 = P2 + p2
    Q1 = Q2 + q2
    V2 = v1 - (params.r1 * P1 + params.x1 * Q1)
    V3 = V2 - (params.r2 * P2 + params.x2 * Q2)
    return FlowSolution(P1=P1, Q1=Q1, P2=P2, Q2=Q2, V1=v1, V2=V2, V3=V3)


def _step(x):
    # unit step with step(0) = 0: damage needs a strict crossing
    return (np.asarray(x) > 0).astype(float)


def attacker_reward(v2, epsilon: float):
    r = _step(v2 - (1.0 + epsilon)) + _step((1.0 - epsilon) - v2)
    return float(r) if np.ndim(r) == 0 else r


def defender_reward(v2, v3, epsilon: float):
    return -((v2 - 1.0) / epsilon) ** 2 - ((v3 - 1.0) / epsilon) ** 2
