"""Exact planar rigid-motion group operations.

Poses are elements of SE(2), stored as a heading angle plus a 2D
translation. Rotations are kept as a scalar angle in (-pi, pi]; the
matrix representation is redundant in the plane and only appears in
test oracles. All functions here are pure and allocation-light so they
can serve as the ground truth for every consistency check in the
package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi], with the half-turn mapped to +pi.

    In-range angles are returned bit-identically, so wrapping is
    idempotent.
    """
    if -math.pi < theta <= math.pi:
        return theta
    w = (theta + math.pi) % TWO_PI - math.pi
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class Pose2:
    """A planar rigid motion: heading ``theta`` (radians) and position (x, y) in meters.

    The heading is wrapped into (-pi, pi] at construction; non-finite
    components are rejected.
    """

    theta: float
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.theta) and math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"Pose2 components must be finite, got {(self.theta, self.x, self.y)}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def to_dict(self) -> dict:
        return {"theta": self.theta, "x": self.x, "y": self.y}

    @staticmethod
    def from_dict(d: dict) -> "Pose2":
        return Pose2(theta=float(d["theta"]), x=float(d["x"]), y=float(d["y"]))


@dataclass(frozen=True)
class DistanceParams:
    """Weight balancing the rotation term against the translation term."""

    alpha_rot: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.alpha_rot) and self.alpha_rot >= 0.0):
            raise ValueError(f"alpha_rot must be finite and >= 0, got {self.alpha_rot}")


def se2_identity() -> Pose2:
    """The identity motion: zero heading, zero translation."""
    return Pose2(0.0, 0.0, 0.0)


def se2_compose(g1: Pose2, g2: Pose2) -> Pose2:
    """Compose two rigid motions: rotate g2's translation into g1's frame, add headings."""
    c = math.cos(g1.theta)
    s = math.sin(g1.theta)
    return Pose2(
        theta=g1.theta + g2.theta,
        x=g1.x + c * g2.x - s * g2.y,
        y=g1.y + s * g2.x + c * g2.y,
    )


def se2_inverse(g: Pose2) -> Pose2:
    """Invert a rigid motion, so that compose(g, inverse(g)) is the identity."""
    c = math.cos(g.theta)
    s = math.sin(g.theta)
    return Pose2(
        theta=-g.theta,
        x=-(c * g.x + s * g.y),
        y=-(-s * g.x + c * g.y),
    )


def state_distance(s1: Pose2, s2: Pose2, params: DistanceParams = DistanceParams()) -> float:
    """Translation distance plus weighted absolute wrapped heading difference.

    Symmetric, non-negative, and zero exactly when the poses coincide
    (for alpha_rot > 0).
    """
    dx = s1.x - s2.x
    dy = s1.y - s2.y
    return math.hypot(dx, dy) + params.alpha_rot * abs(wrap_angle(s1.theta - s2.theta))
