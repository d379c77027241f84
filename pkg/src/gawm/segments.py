"""Ego-motion increments and the three families of consistency segments.

An increment is a local body-frame motion (dx, dy, dtheta). Segments are
finite ordered sequences of increments; from a base segment we derive
zero-action segments, forward-inverse cycles, and Dirichlet-recomposed
segments whose accumulated increments match the original.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


@dataclass(frozen=True)
class ActionIncrement:
    """One local ego-motion increment (dx, dy meters, dtheta radians)."""

    dx: float
    dy: float
    dtheta: float

    def __post_init__(self):
        if not (math.isfinite(self.dx) and math.isfinite(self.dy) and math.isfinite(self.dtheta)):
            raise ValueError(f"increment components must be finite, got {self}")
        if abs(self.dtheta) > math.pi:
            raise ValueError(f"|dtheta| must be <= pi (local increment), got {self.dtheta}")

    def __neg__(self) -> "ActionIncrement":
        return ActionIncrement(-self.dx, -self.dy, -self.dtheta)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta], dtype=np.float64)


ZERO_INCREMENT = ActionIncrement(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ActionSegment:
    """An ordered, possibly empty sequence of increments."""

    increments: tuple[ActionIncrement, ...]

    def __init__(self, increments: Sequence[ActionIncrement] = ()):
        object.__setattr__(self, "increments", tuple(increments))

    def __len__(self) -> int:
        return len(self.increments)

    def __iter__(self) -> Iterator[ActionIncrement]:
        return iter(self.increments)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return ActionSegment(self.increments[i])
        return self.increments[i]

    def cumulative_sum(self) -> np.ndarray:
        """Componentwise sum of all increments as a (3,) array."""
        total = np.zeros(3)
        for a in self.increments:
            total[0] += a.dx
            total[1] += a.dy
            total[2] += a.dtheta
        return total

    def to_array(self) -> np.ndarray:
        """Segment as an (l, 3) array of [dx, dy, dtheta] rows."""
        if not self.increments:
            return np.zeros((0, 3))
        return np.array([[a.dx, a.dy, a.dtheta] for a in self.increments])

    def to_json(self) -> list:
        return [[a.dx, a.dy, a.dtheta] for a in self.increments]

    @staticmethod
    def from_json(rows: Sequence[Sequence[float]]) -> "ActionSegment":
        return ActionSegment([ActionIncrement(float(r[0]), float(r[1]), float(r[2])) for r in rows])


@dataclass(frozen=True)
class DirichletParams:
    """Concentration and seed for simplex weight sampling."""

    concentration: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.concentration) and self.concentration > 0.0):
            raise ValueError(f"concentration must be > 0, got {self.concentration}")


def make_identity_segment(l: int) -> ActionSegment:
    """A segment of l zero increments."""
    if l < 1:
        raise ValueError(f"identity segment length must be >= 1, got {l}")
    return ActionSegment([ZERO_INCREMENT] * l)


def make_inverse_segment(u: ActionSegment) -> ActionSegment:
    """Forward-inverse cycle: u followed by its reversed, negated increments.

    The increments cancel componentwise, so the cumulative sum is exactly
    zero. Note this elementwise negation is a local operational inverse,
    not the exact SE(2) group inverse of the composed motion.
    """
    if len(u) == 0:
        raise ValueError("cannot build an inverse cycle from an empty segment")
    return ActionSegment(list(u.increments) + [-a for a in reversed(u.increments)])


def sample_dirichlet_weights(
    l: int,
    params: DirichletParams,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Sample l non-negative weights summing to 1 from a symmetric Dirichlet.

    Uses gamma-variate normalization. When ``rng`` is omitted, a fresh
    PCG64 generator is derived from ``params.seed``, so repeated calls
    with the same parameters return bit-identical weights.
    """
    if l < 1:
        raise ValueError(f"weight vector length must be >= 1, got {l}")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(params.seed))
    if l == 1:
        return np.array([1.0])
    g = rng.gamma(params.concentration, 1.0, size=l)
    return g / g.sum()


def make_compatibility_segment(
    u_a: ActionSegment,
    params: DirichletParams,
    rng: np.random.Generator | None = None,
) -> ActionSegment:
    """Redistribute u_a's accumulated increments over a same-length segment.

    Each output increment is a Dirichlet weight times the cumulative sum
    of u_a, so both segments accumulate to the same total while realizing
    it on different temporal schedules.
    """
    if len(u_a) == 0:
        raise ValueError("cannot recompose an empty segment")
    w = sample_dirichlet_weights(len(u_a), params, rng=rng)
    total = u_a.cumulative_sum()
    return ActionSegment(
        [ActionIncrement(wi * total[0], wi * total[1], wi * total[2]) for wi in w]
    )
