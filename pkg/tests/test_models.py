import math

import numpy as np
import pytest

from gawm.models import (
    ExactModel,
    PerturbedModel,
    Trajectory,
    ViolationConfig,
    exact_step,
    increment_pose,
    perturbed_step,
    read_trajectory_jsonl,
    rollout,
    write_trajectory_jsonl,
)
from gawm.se2 import Pose2, se2_compose, se2_identity, state_distance
from gawm.segments import ActionIncrement, ActionSegment, ZERO_INCREMENT, make_inverse_segment

from oracles import compose_matrix, pose_close, random_pose


def _rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def _random_segment(rng, length, rot_scale=0.3):
    return ActionSegment(
        [
            ActionIncrement(
                float(rng.uniform(-0.5, 0.5)),
                float(rng.uniform(-0.5, 0.5)),
                float(rng.uniform(-rot_scale, rot_scale)),
            )
            for _ in range(length)
        ]
    )


def test_exact_step_zero_action_fixes_state():
    rng = _rng(1)
    for _ in range(50):
        s = random_pose(rng)
        assert exact_step(s, ZERO_INCREMENT) == s


def test_exact_step_matrix_oracle_cases():
    s1 = exact_step(Pose2(0, 0, 0), ActionIncrement(1, 0, math.pi / 2))
    assert pose_close(s1, Pose2(math.pi / 2, 1, 0), 1e-12)
    assert pose_close(s1, compose_matrix(Pose2(0, 0, 0), increment_pose(ActionIncrement(1, 0, math.pi / 2))), 1e-12)

    s2 = exact_step(Pose2(math.pi / 2, 0, 0), ActionIncrement(1, 0, 0))
    assert pose_close(s2, Pose2(math.pi / 2, 0, 1), 1e-12)


def test_exact_model_group_action_conditions():
    # identity, compatibility with single composed motion, inverse for
    # translation-only segments: the three group-action conditions
    rng = _rng(42)
    model = ExactModel()
    for _ in range(1000):
        s = random_pose(rng)
        length = int(rng.integers(1, 9))
        seg = _random_segment(rng, length)
        traj = rollout(model, s, seg, 0)
        composed = s
        for a in seg:
            composed = se2_compose(composed, increment_pose(a))
        assert pose_close(traj[-1], composed, 1e-9)
    for _ in range(200):
        s = random_pose(rng)
        seg = _random_segment(rng, int(rng.integers(1, 5)), rot_scale=0.0)
        back = rollout(model, s, make_inverse_segment(seg), 0)
        assert state_distance(back[-1], s) <= 1e-9


def test_inverse_cycle_residual_matches_stepwise_oracle():
    # with rotations the elementwise negation is not the exact group
    # inverse; the residual must equal naive stepwise simulation
    rng = _rng(3)
    model = ExactModel()
    residuals = []
    for _ in range(100):
        s = random_pose(rng)
        seg = _random_segment(rng, 3)
        cycle = make_inverse_segment(seg)
        end = rollout(model, s, cycle, 0)[-1]
        oracle = s
        for a in cycle:
            oracle = compose_matrix(oracle, increment_pose(a))
        assert pose_close(end, oracle, 1e-12)
        residuals.append(state_distance(end, s))
    print(f"inverse-cycle residual under rotation: mean={np.mean(residuals):.3e} "
          f"max={np.max(residuals):.3e}")


def test_perturbed_all_disabled_is_bit_identical_to_exact():
    rng = _rng(9)
    cfg = ViolationConfig()
    for _ in range(100):
        s = random_pose(rng)
        a = ActionIncrement(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)))
        exact = exact_step(s, a)
        pert = perturbed_step(s, a, cfg, _rng(0))
        assert (exact.theta, exact.x, exact.y) == (pert.theta, pert.x, pert.y)


def test_drift_bias_single_step():
    cfg = ViolationConfig(drift_bias=ActionIncrement(0.1, 0, 0))
    out = perturbed_step(Pose2(0, 0, 0), ZERO_INCREMENT, cfg, _rng(0))
    assert out.x == pytest.approx(0.1, abs=1e-15)
    assert out.y == 0.0 and out.theta == 0.0


def test_drift_matches_stepwise_simulation_exactly():
    cfg = ViolationConfig(drift_bias=ActionIncrement(0.02, -0.01, 0.05))
    model = PerturbedModel(cfg)
    rng = _rng(4)
    for _ in range(20):
        s = random_pose(rng)
        steps = int(rng.integers(1, 6))
        traj = rollout(model, s, ActionSegment([ZERO_INCREMENT] * steps), 0)
        oracle = s
        for _ in range(steps):
            oracle = exact_step(oracle, cfg.drift_bias)
        assert state_distance(traj[-1], oracle) <= 1e-12


def test_saturation_spot_value():
    cfg = ViolationConfig(saturation_scale=1.0)
    out = perturbed_step(Pose2(0, 0, 0), ActionIncrement(2, 0, 0), cfg, _rng(0))
    assert out.x == pytest.approx(math.tanh(2.0), abs=1e-15)


def test_asym_gain_forward_back():
    cfg = ViolationConfig(asym_gain=(1.2, 1.0))
    s1 = perturbed_step(Pose2(0, 0, 0), ActionIncrement(1, 0, 0), cfg, _rng(0))
    s2 = perturbed_step(s1, ActionIncrement(-1, 0, 0), cfg, _rng(0))
    assert state_distance(s2, Pose2(0, 0, 0)) == pytest.approx(0.2, abs=1e-12)


def test_rollout_empty_actions():
    s = Pose2(0.5, 1, 2)
    traj = rollout(ExactModel(), s, ActionSegment([]), 0)
    assert len(traj) == 1 and traj[0] == s


def test_rollout_lengths_and_stepwise_consistency():
    rng = _rng(5)
    seg = _random_segment(rng, 8)
    model = ExactModel()
    traj = rollout(model, Pose2(0, 0, 0), seg, 0)
    assert len(traj) == 9
    for i, a in enumerate(seg):
        assert traj[i + 1] == exact_step(traj[i], a)


def test_zero_noise_rollouts_ignore_seed():
    cfg = ViolationConfig(drift_bias=ActionIncrement(0.01, 0, 0))
    model = PerturbedModel(cfg)
    seg = _random_segment(_rng(6), 10)
    t1 = rollout(model, Pose2(0, 0, 0), seg, 1)
    t2 = rollout(model, Pose2(0, 0, 0), seg, 999)
    assert all(a == b for a, b in zip(t1, t2))


def test_same_seed_bit_identical_trajectories():
    model = PerturbedModel(ViolationConfig(noise_sigma=0.05))
    seg = _random_segment(_rng(7), 16)
    t1 = rollout(model, Pose2(0, 0, 0), seg, 1234)
    t2 = rollout(model, Pose2(0, 0, 0), seg, 1234)
    assert all((a.theta, a.x, a.y) == (b.theta, b.x, b.y) for a, b in zip(t1, t2))
    t3 = rollout(model, Pose2(0, 0, 0), seg, 1235)
    assert any(a != b for a, b in zip(t1, t3))


def test_violation_config_validation():
    with pytest.raises(ValueError):
        ViolationConfig(saturation_scale=0.0)
    with pytest.raises(ValueError):
        ViolationConfig(noise_sigma=-1.0)
    with pytest.raises(ValueError):
        ViolationConfig(asym_gain=(0.0, 1.0))
    # infinite saturation scale means the injector is disabled
    assert ViolationConfig(saturation_scale=math.inf).saturation_scale is None


def test_trajectory_requires_start():
    with pytest.raises(ValueError):
        Trajectory([])


def test_trajectory_jsonl_round_trip(tmp_path):
    seg = _random_segment(_rng(8), 5)
    traj = rollout(ExactModel(), Pose2(0.3, -1, 2), seg, 0)
    path = tmp_path / "traj.jsonl"
    write_trajectory_jsonl(path, traj, {"seed": 0, "model": "exact", "actions_file": "a.json"})
    header, loaded = read_trajectory_jsonl(path)
    assert header["model"] == "exact"
    assert all(pose_close(a, b, 1e-15) for a, b in zip(traj, loaded))
