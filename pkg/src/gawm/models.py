"""World-model interface plus fully-known reference simulators.

The exact model realizes every increment as a rigid-motion composition,
so its rollouts satisfy the group-action conditions to floating-point
precision. The perturbed model wraps the same transition with
configurable violation injectors (drift, saturation, asymmetric gain,
action noise) whose effect on every consistency probe can be checked
against direct stepwise simulation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .se2 import Pose2, se2_compose
from .segments import ActionIncrement, ActionSegment, ZERO_INCREMENT


class WorldModel(Protocol):
    """Anything that advances a pose by one action under a seeded noise source."""

    def step(self, state: Pose2, action: ActionIncrement, rng: np.random.Generator) -> Pose2:
        ...


@dataclass(frozen=True)
class Trajectory:
    """An ordered pose sequence of length T+1, including the start pose."""

    poses: tuple[Pose2, ...]

    def __init__(self, poses: Sequence[Pose2]):
        if len(poses) < 1:
            raise ValueError("a trajectory must contain at least the start pose")
        object.__setattr__(self, "poses", tuple(poses))

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)

    def positions(self) -> np.ndarray:
        """(T+1, 2) array of xy positions."""
        return np.array([[p.x, p.y] for p in self.poses])

    def headings(self) -> np.ndarray:
        """(T+1,) array of headings."""
        return np.array([p.theta for p in self.poses])


def increment_pose(action: ActionIncrement) -> Pose2:
    """The rigid motion realized by one body-frame increment."""
    return Pose2(theta=action.dtheta, x=action.dx, y=action.dy)


def exact_step(state: Pose2, action: ActionIncrement) -> Pose2:
    """Advance a pose by composing the increment's motion on the right."""
    return se2_compose(state, increment_pose(action))


class ExactModel:
    """Deterministic simulator whose step is exact rigid-motion composition."""

    name = "exact"

    def step(self, state: Pose2, action: ActionIncrement, rng: np.random.Generator) -> Pose2:
        return exact_step(state, action)


@dataclass(frozen=True)
class ViolationConfig:
    """Injectors that break each group-action condition in a known way.

    drift_bias is added to every realized increment (breaks identity),
    saturation_scale applies c*tanh(a/c) componentwise (breaks
    compatibility; None disables), asym_gain scales positive vs negative
    translation components (breaks inverse consistency), and noise_sigma
    adds seeded Gaussian noise to the realized increment (rollout
    dispersion).
    """

    drift_bias: ActionIncrement = ZERO_INCREMENT
    saturation_scale: float | None = None
    asym_gain: tuple[float, float] = (1.0, 1.0)
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.saturation_scale is not None:
            if math.isinf(self.saturation_scale) and self.saturation_scale > 0:
                object.__setattr__(self, "saturation_scale", None)
            elif not (math.isfinite(self.saturation_scale) and self.saturation_scale > 0.0):
                raise ValueError(f"saturation_scale must be > 0 or None, got {self.saturation_scale}")
        if self.noise_sigma < 0.0 or not math.isfinite(self.noise_sigma):
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        gp, gm = self.asym_gain
        if gp <= 0.0 or gm <= 0.0:
            raise ValueError(f"asym_gain components must be > 0, got {self.asym_gain}")

    def is_stochastic(self) -> bool:
        return self.noise_sigma > 0.0

    def to_dict(self) -> dict:
        return {
            "drift_bias": [self.drift_bias.dx, self.drift_bias.dy, self.drift_bias.dtheta],
            "saturation_scale": self.saturation_scale,
            "asym_gain": list(self.asym_gain),
            "noise_sigma": self.noise_sigma,
        }

    @staticmethod
    def from_dict(d: dict) -> "ViolationConfig":
        db = d.get("drift_bias", [0.0, 0.0, 0.0])
        sat = d.get("saturation_scale")
        return ViolationConfig(
            drift_bias=ActionIncrement(float(db[0]), float(db[1]), float(db[2])),
            saturation_scale=None if sat is None else float(sat),
            asym_gain=tuple(float(g) for g in d.get("asym_gain", (1.0, 1.0))),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
        )


def perturbed_step(
    state: Pose2,
    action: ActionIncrement,
    cfg: ViolationConfig,
    rng: np.random.Generator,
) -> Pose2:
    """Advance a pose after passing the increment through the injectors.

    The realized increment is asym_gain * saturate(action) + drift_bias
    + Gaussian noise, then applied exactly. With everything disabled this
    reduces bit-for-bit to the exact step.
    """
    dx, dy, dth = action.dx, action.dy, action.dtheta
    c = cfg.saturation_scale
    if c is not None:
        dx = c * math.tanh(dx / c)
        dy = c * math.tanh(dy / c)
        dth = c * math.tanh(dth / c)
    gp, gm = cfg.asym_gain
    dx *= gp if dx >= 0.0 else gm
    dy *= gp if dy >= 0.0 else gm
    dx += cfg.drift_bias.dx
    dy += cfg.drift_bias.dy
    dth += cfg.drift_bias.dtheta
    if cfg.noise_sigma > 0.0:
        eps = rng.normal(0.0, cfg.noise_sigma, size=3)
        dx += eps[0]
        dy += eps[1]
        dth += eps[2]
    cth = math.cos(state.theta)
    sth = math.sin(state.theta)
    return Pose2(
        theta=state.theta + dth,
        x=state.x + cth * dx - sth * dy,
        y=state.y + sth * dx + cth * dy,
    )


@dataclass(frozen=True)
class PerturbedModel:
    """Simulator with configurable, oracle-checkable violations."""

    cfg: ViolationConfig = field(default_factory=ViolationConfig)
    name: str = "perturbed"

    def step(self, state: Pose2, action: ActionIncrement, rng: np.random.Generator) -> Pose2:
        return perturbed_step(state, action, self.cfg, rng)


def rollout(
    model: WorldModel,
    start: Pose2,
    actions: ActionSegment,
    rng: np.random.Generator | int,
) -> Trajectory:
    """Fold the model's step over an action segment, collecting every pose."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.PCG64(rng))
    poses = [start]
    state = start
    for a in actions:
        state = model.step(state, a, rng)
        poses.append(state)
    return Trajectory(poses)


def write_trajectory_jsonl(path, traj: Trajectory, header: dict) -> None:
    """One header line, then one pose object per line."""
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for p in traj:
            f.write(json.dumps(p.to_dict()) + "\n")


def read_trajectory_jsonl(path) -> tuple[dict, Trajectory]:
    with open(path) as f:
        lines = [line for line in f if line.strip()]
    header = json.loads(lines[0])
    poses = [Pose2.from_dict(json.loads(line)) for line in lines[1:]]
    return header, Trajectory(poses)
