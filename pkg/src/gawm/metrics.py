"""Consistency and robustness metrics for any planar world model.

The consistency suite runs controlled probes against a fixed set of
evaluation sequences: zero-action pauses inserted into the action
stream (identity), forward-inverse cycles branched off the stream
(inverse), and endpoint comparison of two segments with equal
accumulated increments (composition). Per-configuration errors average
the recovered-state distance over probe instances, component errors
average over configurations, and the aggregate score is the mean of the
three components.

The robustness metric measures dispersion across repeated stochastic
rollouts of the same action sequence, either raw or after removing the
best global rigid transform per rollout.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .models import Trajectory, WorldModel, rollout
from .se2 import DistanceParams, Pose2, state_distance
from .segments import (
    ActionSegment,
    DirichletParams,
    ZERO_INCREMENT,
    make_compatibility_segment,
    make_inverse_segment,
)

KIND_IDENTITY = "identity"
KIND_INVERSE = "inverse"
KIND_COMPOSITION = "composition"
PROBE_KINDS = (KIND_IDENTITY, KIND_INVERSE, KIND_COMPOSITION)

MAX_LOCAL_WINDOW = 8

_KIND_CODE = {KIND_IDENTITY: 0, KIND_INVERSE: 1, KIND_COMPOSITION: 2}


@dataclass(frozen=True)
class EvalSequence:
    """One evaluation item: a start pose and the base action stream."""

    start: Pose2
    actions: ActionSegment


@dataclass(frozen=True)
class ProbeConfig:
    """Which condition to probe, how many segments, and how long each is."""

    kind: str
    k: int = 1
    l: int = 1
    start_indices: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in PROBE_KINDS:
            raise ValueError(f"unknown probe kind: {self.kind!r}")
        if self.k < 1 or self.l < 1:
            raise ValueError(f"k and l must be >= 1, got k={self.k}, l={self.l}")
        if self.l > MAX_LOCAL_WINDOW:
            raise ValueError(f"l={self.l} exceeds the local regime (<= {MAX_LOCAL_WINDOW})")
        if self.kind == KIND_COMPOSITION and self.k != 1:
            raise ValueError("composition probes carry k=1 by definition")


@dataclass(frozen=True)
class ProbeResult:
    """Per-configuration error: mean and dispersion over probe instances."""

    kind: str
    k: int
    l: int
    mean: float
    std: float
    n_instances: int
    start_positions: tuple[int, ...]


@dataclass(frozen=True)
class GacReport:
    per_config: tuple[ProbeResult, ...]
    delta_id: float
    delta_inv: float
    delta_comp: float
    std_id: float
    std_inv: float
    std_comp: float
    e_gac: float


@dataclass(frozen=True)
class GarEntry:
    horizon: int
    aligned_mean: float
    aligned_std: float
    nonaligned_mean: float
    nonaligned_std: float
    n_sequences: int


@dataclass(frozen=True)
class GarReport:
    n_rollouts: int
    entries: tuple[GarEntry, ...]
    note: str | None = None


def _probe_rng(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.PCG64(ss))


def _branch_endpoint(model: WorldModel, state: Pose2, segment: ActionSegment,
                     rng: np.random.Generator) -> Pose2:
    """Endpoint of a probe branch, using the model's native rollout when it
    has one (so the probe measures the model's own generation process)."""
    sampler = getattr(model, "sample_trajectory", None)
    if sampler is not None:
        return sampler(state, segment, rng)[-1]
    for a in segment:
        state = model.step(state, a, rng)
    return state


def identity_positions(n_actions: int, k: int) -> tuple[int, ...]:
    """k insertion offsets, uniformly spaced over the stream (offset i pauses
    before executing action i; offset n pauses after the last action)."""
    return tuple((j + 1) * n_actions // (k + 1) for j in range(k))


def window_positions(n_actions: int, l: int, k: int) -> tuple[int, ...]:
    """k window starts of length l, uniformly spaced over valid offsets."""
    last = n_actions - l
    if last < 0:
        raise ValueError(f"segment length {l} exceeds stream length {n_actions}")
    if k == 1:
        return (last // 2,)
    return tuple(round(j * last / (k - 1)) for j in range(k))


def probe_identity(model: WorldModel, sequences, cfg: ProbeConfig,
                   dist: DistanceParams, seed: int) -> ProbeResult:
    """Insert zero-action pauses into each stream and measure the drift across
    each pause window. The stream continues from the pause endpoint."""
    if cfg.kind != KIND_IDENTITY:
        raise ValueError(f"expected an identity config, got {cfg.kind!r}")
    errors = []
    positions_used: tuple[int, ...] = ()
    for s_idx, seq in enumerate(sequences):
        n = len(seq.actions)
        positions = cfg.start_indices or identity_positions(n, cfg.k)
        if any(p < 0 or p > n for p in positions):
            raise ValueError(f"insertion offsets {positions} out of range for {n} actions")
        positions_used = tuple(positions)
        pos = sorted(positions)
        pause_segment = ActionSegment([ZERO_INCREMENT] * cfg.l)
        stream_rng = _probe_rng(seed, _KIND_CODE[cfg.kind], cfg.k, cfg.l, s_idx, 0)
        state = seq.start
        pi = 0
        for i in range(n + 1):
            while pi < len(pos) and pos[pi] == i:
                pause_rng = _probe_rng(seed, _KIND_CODE[cfg.kind], cfg.k, cfg.l, s_idx, 1 + pi)
                before = state
                state = _branch_endpoint(model, state, pause_segment, pause_rng)
                errors.append(state_distance(state, before, dist))
                pi += 1
            if i < n:
                state = model.step(state, seq.actions[i], stream_rng)
    return _probe_result(cfg, errors, positions_used)


def probe_inverse(model: WorldModel, sequences, cfg: ProbeConfig,
                  dist: DistanceParams, seed: int) -> ProbeResult:
    """Branch a forward-inverse cycle off the stream at each window start and
    measure the distance back to the branch point. The stream itself is
    unaffected by the branches."""
    if cfg.kind != KIND_INVERSE:
        raise ValueError(f"expected an inverse config, got {cfg.kind!r}")
    errors = []
    positions_used: tuple[int, ...] = ()
    for s_idx, seq in enumerate(sequences):
        n = len(seq.actions)
        positions = cfg.start_indices or window_positions(n, cfg.l, cfg.k)
        if any(p < 0 or p + cfg.l > n for p in positions):
            raise ValueError(f"window starts {positions} out of range for {n} actions")
        positions_used = tuple(positions)
        pos_set = sorted(positions)
        stream_rng = _probe_rng(seed, _KIND_CODE[cfg.kind], cfg.k, cfg.l, s_idx, 0)
        state = seq.start
        for i in range(n + 1):
            for inst, p in enumerate(pos_set):
                if p != i:
                    continue
                cycle = make_inverse_segment(seq.actions[p : p + cfg.l])
                branch_rng = _probe_rng(seed, _KIND_CODE[cfg.kind], cfg.k, cfg.l, s_idx, 1 + inst)
                branch = _branch_endpoint(model, state, cycle, branch_rng)
                errors.append(state_distance(branch, state, dist))
            if i < n:
                state = model.step(state, seq.actions[i], stream_rng)
    return _probe_result(cfg, errors, positions_used)


def probe_composition(model: WorldModel, sequences, cfg: ProbeConfig,
                      dist: DistanceParams, seed: int,
                      concentration: float = 1.0) -> ProbeResult:
    """Roll the original window and a recomposed window with equal accumulated
    increments from the same state (independent noise branches) and measure
    the endpoint mismatch."""
    if cfg.kind != KIND_COMPOSITION:
        raise ValueError(f"expected a composition config, got {cfg.kind!r}")
    dirichlet = DirichletParams(concentration=concentration, seed=seed)
    errors = []
    positions_used: tuple[int, ...] = ()
    for s_idx, seq in enumerate(sequences):
        n = len(seq.actions)
        positions = cfg.start_indices or window_positions(n, cfg.l, 1)
        if any(p < 0 or p + cfg.l > n for p in positions):
            raise ValueError(f"window starts {positions} out of range for {n} actions")
        positions_used = tuple(positions)
        pos_set = sorted(positions)
        stream_rng = _probe_rng(seed, _KIND_CODE[cfg.kind], cfg.k, cfg.l, s_idx, 0)
        state = seq.start
        for i in range(n + 1):
            for inst, p in enumerate(pos_set):
                if p != i:
                    continue
                u_a = seq.actions[p : p + cfg.l]
                weights_rng = _probe_rng(seed, _KIND_CODE[cfg.kind], cfg.k, cfg.l, s_idx, 1 + 3 * inst)
                u_b = make_compatibility_segment(u_a, dirichlet, rng=weights_rng)
                rng_a = _probe_rng(seed, _KIND_CODE[cfg.kind], cfg.k, cfg.l, s_idx, 2 + 3 * inst)
                rng_b = _probe_rng(seed, _KIND_CODE[cfg.kind], cfg.k, cfg.l, s_idx, 3 + 3 * inst)
                end_a = _branch_endpoint(model, state, u_a, rng_a)
                end_b = _branch_endpoint(model, state, u_b, rng_b)
                errors.append(state_distance(end_a, end_b, dist))
            if i < n:
                state = model.step(state, seq.actions[i], stream_rng)
    return _probe_result(cfg, errors, positions_used)


def _probe_result(cfg: ProbeConfig, errors, positions) -> ProbeResult:
    if not errors:
        raise ValueError(f"probe {cfg.kind} (k={cfg.k}, l={cfg.l}) produced no instances")
    arr = np.array(errors)
    return ProbeResult(
        kind=cfg.kind,
        k=cfg.k,
        l=cfg.l,
        mean=float(arr.mean()),
        std=float(arr.std()),
        n_instances=len(errors),
        start_positions=tuple(positions),
    )


def default_probe_grid() -> list[ProbeConfig]:
    """Nine configurations: identity and inverse sweep the segment length with
    a single probed segment; composition sweeps the window length."""
    grid = [ProbeConfig(KIND_IDENTITY, k=1, l=l) for l in (1, 3, 5)]
    grid += [ProbeConfig(KIND_INVERSE, k=1, l=l) for l in (1, 3, 5)]
    grid += [ProbeConfig(KIND_COMPOSITION, k=1, l=l) for l in (2, 4, 6)]
    return grid


def run_probe(model: WorldModel, sequences, cfg: ProbeConfig, dist: DistanceParams,
              seed: int, concentration: float = 1.0) -> ProbeResult:
    if cfg.kind == KIND_IDENTITY:
        return probe_identity(model, sequences, cfg, dist, seed)
    if cfg.kind == KIND_INVERSE:
        return probe_inverse(model, sequences, cfg, dist, seed)
    return probe_composition(model, sequences, cfg, dist, seed, concentration)


def aggregate_gac(per_config) -> GacReport:
    """Unweighted component means over configurations and their simple average.

    Component dispersions treat the configurations as an equally weighted
    mixture of their instance populations.
    """
    by_kind: dict[str, list[ProbeResult]] = {k: [] for k in PROBE_KINDS}
    for r in per_config:
        by_kind[r.kind].append(r)
    means = {}
    stds = {}
    for kind in PROBE_KINDS:
        results = by_kind[kind]
        if not results:
            raise ValueError(f"no probe configurations for component {kind!r}")
        component_mean = sum(r.mean for r in results) / len(results)
        mixture_var = sum(r.std ** 2 + (r.mean - component_mean) ** 2 for r in results) / len(results)
        means[kind] = component_mean
        stds[kind] = math.sqrt(mixture_var)
    e_gac = (means[KIND_IDENTITY] + means[KIND_INVERSE] + means[KIND_COMPOSITION]) / 3.0
    return GacReport(
        per_config=tuple(per_config),
        delta_id=means[KIND_IDENTITY],
        delta_inv=means[KIND_INVERSE],
        delta_comp=means[KIND_COMPOSITION],
        std_id=stds[KIND_IDENTITY],
        std_inv=stds[KIND_INVERSE],
        std_comp=stds[KIND_COMPOSITION],
        e_gac=e_gac,
    )


def evaluate_gac(model: WorldModel, sequences, grid, dist: DistanceParams,
                 seed: int, concentration: float = 1.0) -> GacReport:
    """Run every configuration in the grid and aggregate.

    Results are ordered by sorted probe identifier so the report does not
    depend on evaluation order.
    """
    ordered = sorted(grid, key=lambda c: (_KIND_CODE[c.kind], c.k, c.l))
    results = [run_probe(model, sequences, cfg, dist, seed, concentration) for cfg in ordered]
    return aggregate_gac(results)


def align_trajectory(traj: Trajectory, reference: Trajectory) -> Trajectory:
    """Apply the rigid transform that best fits traj's positions to the
    reference in the least-squares sense (closed form, no scale)."""
    if len(traj) != len(reference):
        raise ValueError(f"trajectory lengths differ: {len(traj)} vs {len(reference)}")
    if len(traj) < 2:
        raise ValueError("alignment needs at least two poses")
    p = traj.positions()
    q = reference.positions()
    mu_p = p.mean(axis=0)
    mu_q = q.mean(axis=0)
    pc = p - mu_p
    qc = q - mu_q
    dot = float(np.sum(pc * qc))
    cross = float(np.sum(pc[:, 0] * qc[:, 1] - pc[:, 1] * qc[:, 0]))
    phi = math.atan2(cross, dot)
    c, s = math.cos(phi), math.sin(phi)
    rot = np.array([[c, -s], [s, c]])
    t = mu_q - rot @ mu_p
    moved = p @ rot.T + t
    poses = [
        Pose2(theta=pose.theta + phi, x=float(xy[0]), y=float(xy[1]))
        for pose, xy in zip(traj, moved)
    ]
    return Trajectory(poses)


def gar_error(trajectories, dist: DistanceParams, aligned: bool) -> float:
    """Mean pairwise, time-averaged state distance over repeated rollouts.

    The shared start pose is excluded from the time average. With the
    aligned flag, every trajectory is first rigidly aligned to the first
    one; since alignment fits positions only while the distance also
    carries a heading term, the raw value is kept whenever the fitted
    transforms fail to reduce the total, so removing drift can never add
    error.
    """
    n = len(trajectories)
    if n < 2:
        raise ValueError(f"dispersion needs at least 2 rollouts, got {n}")
    lengths = {len(t) for t in trajectories}
    if len(lengths) != 1:
        raise ValueError(f"rollouts must share one length, got {sorted(lengths)}")
    horizon = lengths.pop() - 1
    if horizon < 1:
        raise ValueError("rollouts must contain at least one step")
    raw = _pairwise_mean_distance(trajectories, dist)
    if not aligned:
        return raw
    moved = [trajectories[0]] + [
        align_trajectory(t, trajectories[0]) for t in trajectories[1:]
    ]
    return min(_pairwise_mean_distance(moved, dist), raw)


def _pairwise_mean_distance(trajectories, dist: DistanceParams) -> float:
    n = len(trajectories)
    pos = np.stack([t.positions()[1:] for t in trajectories])
    head = np.stack([t.headings()[1:] for t in trajectories])
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            d_pos = np.linalg.norm(pos[i] - pos[j], axis=1)
            d_head = np.abs(_wrap_array(head[i] - head[j]))
            total += float(np.mean(d_pos + dist.alpha_rot * d_head))
    return 2.0 * total / (n * (n - 1))


def _wrap_array(theta: np.ndarray) -> np.ndarray:
    w = (theta + math.pi) % (2.0 * math.pi) - math.pi
    return np.where(w == -math.pi, math.pi, w)


def evaluate_gar(model: WorldModel, sequences, horizons, n_rollouts: int,
                 dist: DistanceParams, seed: int, note: str | None = None) -> GarReport:
    """Repeated seeded rollouts per sequence, truncated to each horizon.

    Models exposing a native ``sample_trajectory`` (their own rollout
    process) are sampled through it; anything else is stepped through the
    generic rollout. Sequences must cover the largest horizon; rollout i
    of a sequence uses a generator derived from (seed, sequence, i), so
    the suite is reproducible and worker-order independent.
    """
    if n_rollouts < 2:
        raise ValueError(f"n_rollouts must be >= 2, got {n_rollouts}")
    sampler = getattr(model, "sample_trajectory", None)
    if sampler is None:
        sampler = lambda start, actions, rng: rollout(model, start, actions, rng)
    horizons = sorted(horizons)
    t_max = horizons[-1]
    per_horizon: dict[int, dict[str, list[float]]] = {
        h: {"aligned": [], "nonaligned": []} for h in horizons
    }
    for s_idx, seq in enumerate(sequences):
        if len(seq.actions) < t_max:
            raise ValueError(
                f"sequence {s_idx} has {len(seq.actions)} actions, needs >= {t_max}"
            )
        full = [
            sampler(seq.start, seq.actions[:t_max], _probe_rng(seed, 3, s_idx, i))
            for i in range(n_rollouts)
        ]
        for h in horizons:
            trajs = [Trajectory(t.poses[: h + 1]) for t in full]
            per_horizon[h]["nonaligned"].append(gar_error(trajs, dist, aligned=False))
            per_horizon[h]["aligned"].append(gar_error(trajs, dist, aligned=True))
    entries = []
    for h in horizons:
        al = np.array(per_horizon[h]["aligned"])
        na = np.array(per_horizon[h]["nonaligned"])
        entries.append(
            GarEntry(
                horizon=h,
                aligned_mean=float(al.mean()),
                aligned_std=float(al.std()),
                nonaligned_mean=float(na.mean()),
                nonaligned_std=float(na.std()),
                n_sequences=len(al),
            )
        )
    return GarReport(n_rollouts=n_rollouts, entries=tuple(entries), note=note)


def write_gac_json(path, report: GacReport, model_name: str) -> None:
    payload = {
        "model": model_name,
        "per_config": [
            {
                "kind": r.kind,
                "k": r.k,
                "l": r.l,
                "mean": r.mean,
                "std": r.std,
                "n_instances": r.n_instances,
                "start_positions": list(r.start_positions),
            }
            for r in report.per_config
        ],
        "delta_id": report.delta_id,
        "delta_inv": report.delta_inv,
        "delta_comp": report.delta_comp,
        "std_id": report.std_id,
        "std_inv": report.std_inv,
        "std_comp": report.std_comp,
        "e_gac": report.e_gac,
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def write_gac_csv(path, report: GacReport, model_name: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "kind", "k", "l", "mean", "std"])
        for r in report.per_config:
            w.writerow([model_name, r.kind, r.k, r.l, repr(r.mean), repr(r.std)])


def write_gac_summary_csv(path, report: GacReport, model_name: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["model", "delta_id", "std_id", "delta_inv", "std_inv",
             "delta_comp", "std_comp", "e_gac"]
        )
        w.writerow(
            [model_name, repr(report.delta_id), repr(report.std_id),
             repr(report.delta_inv), repr(report.std_inv),
             repr(report.delta_comp), repr(report.std_comp), repr(report.e_gac)]
        )


def write_gac_gnuplot(path, report: GacReport) -> None:
    """Whitespace-separated probe-trend data, one block per probe kind."""
    with open(path, "w") as f:
        f.write("# kind k l mean std\n")
        for kind in PROBE_KINDS:
            for r in report.per_config:
                if r.kind == kind:
                    f.write(f"{r.kind} {r.k} {r.l} {r.mean!r} {r.std!r}\n")
            f.write("\n")


def write_gar_json(path, report: GarReport, model_name: str) -> None:
    payload = {
        "model": model_name,
        "n_rollouts": report.n_rollouts,
        "note": report.note,
        "entries": [
            {
                "horizon": e.horizon,
                "aligned_mean": e.aligned_mean,
                "aligned_std": e.aligned_std,
                "nonaligned_mean": e.nonaligned_mean,
                "nonaligned_std": e.nonaligned_std,
                "n_sequences": e.n_sequences,
            }
            for e in report.entries
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def write_gar_csv(path, report: GarReport, model_name: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["model", "horizon", "n_rollouts", "n_sequences",
             "aligned_mean", "aligned_std", "nonaligned_mean", "nonaligned_std"]
        )
        for e in report.entries:
            w.writerow(
                [model_name, e.horizon, report.n_rollouts, e.n_sequences,
                 repr(e.aligned_mean), repr(e.aligned_std),
                 repr(e.nonaligned_mean), repr(e.nonaligned_std)]
            )
