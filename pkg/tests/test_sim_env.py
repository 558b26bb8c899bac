import numpy as np
import pandas as pd
import pytest

from forceadapt.config import CurriculumConfig, EnvConfig, RandomizationConfig, RewardConfig
from forceadapt.errors import ModelValidationError, NonFiniteError
from forceadapt.force_curriculum import WIDE_CLIP, application_point, gravity_feasible
from forceadapt.kinematics import chain_kinematics, gravity_torque_from, jacobian_at
from forceadapt.sim_env import (
    LOWER_DOF,
    DeskEnv,
    MinJerkSegment,
    RewardInputs,
    TrajectoryRecorder,
    apply_external_forces,
    compute_rewards,
    integrate_arm,
    max_delay_steps,
    minimum_jerk,
    minimum_jerk_velocity,
    projected_gravity,
    randomize,
    sample_goals,
    sample_lower_goal,
    sample_waypoint,
)
from forceadapt.trainer import policy_dims


def _zero_action(env):
    return np.zeros((env.num_envs, env.n))


def _check_holding_torques(env):
    st = env.state
    for s, arm in enumerate(env.model.arms):
        sl = env.arm_slices[s]
        kin = chain_kinematics(arm, st.q[:, sl])
        tau_g = gravity_torque_from(kin, arm.masses * st.link_mass_scale[:, sl], env.gravity)
        J = -jacobian_at(kin, application_point(kin, st.application_u[:, s]))
        tau = tau_g + np.einsum("eij,ei->ej", J, st.applied_force[:, s])
        feasible = gravity_feasible(arm.torque_limits, tau_g)
        assert np.all(np.abs(tau[feasible]) <= arm.torque_limits + 1e-9)


def test_reset_shapes(humanoid):
    env = DeskEnv(humanoid, EnvConfig(), CurriculumConfig(), num_envs=3, seed=0)
    obs = env.observation
    assert obs.joint_pos_hist.shape == (3, 5, 12)
    assert obs.prev_action_hist.shape == (3, 5, 12)
    assert obs.root_ang_vel_hist.shape == (3, 5, 3)
    dims = policy_dims(humanoid, env.cfg)
    assert obs.flatten(env.cfg.obs_scales, env.joint_offsets).shape == (3, dims["proprio"])
    assert obs.proprioception(env.cfg.obs_scales, LOWER_DOF, env.joint_offsets).shape == (3, dims["estimator"])
    priv = env.privileged()
    assert priv.flatten(env.cfg.obs_scales).shape == (3, dims["privileged"])
    lower, upper = env.goal_features()
    assert lower.shape == (3, 6) and upper.shape == (3, 8)
    np.testing.assert_allclose(obs.projected_gravity_hist, np.broadcast_to([0.0, 0.0, -1.0], (3, 5, 3)))


def test_fixed_base_model_rejected(toy_arm):
    with pytest.raises(ModelValidationError):
        DeskEnv(toy_arm, EnvConfig(), CurriculumConfig())


def test_step_rejects_bad_actions(humanoid):
    env = DeskEnv(humanoid, EnvConfig(), CurriculumConfig(), num_envs=2)
    with pytest.raises(ValueError):
        env.step(np.zeros((2, 5)))
    action = _zero_action(env)
    action[1, 3] = np.nan
    with pytest.raises(NonFiniteError) as info:
        env.step(action)
    assert info.value.diagnostics["instances"] == [1]


def test_same_seed_same_trajectory(humanoid):
    a = DeskEnv(humanoid, EnvConfig(), CurriculumConfig(), num_envs=2, seed=7)
    b = DeskEnv(humanoid, EnvConfig(), CurriculumConfig(), num_envs=2, seed=7)
    a.set_force_scale(1.0)
    b.set_force_scale(1.0)
    actions = np.random.default_rng(0).uniform(-1, 1, size=(20, 2, humanoid.dof))
    for action in actions:
        ra, rb = a.step(action), b.step(action)
        np.testing.assert_array_equal(ra.observation.joint_pos_hist, rb.observation.joint_pos_hist)
        np.testing.assert_array_equal(ra.reward_upper, rb.reward_upper)
        np.testing.assert_array_equal(ra.privileged.ee_forces, rb.privileged.ee_forces)


def test_zero_force_scale_applies_no_force(humanoid):
    env = DeskEnv(humanoid, EnvConfig(), CurriculumConfig(), num_envs=4, seed=1)
    env.set_force_scale(0.0)
    for _ in range(20):
        env.step(_zero_action(env))
        assert np.all(env.state.applied_force == 0.0)


def test_force_mode_none(humanoid):
    env = DeskEnv(humanoid, EnvConfig(), CurriculumConfig(), num_envs=2, force_mode="none")
    env.set_force_scale(1.0)
    for _ in range(10):
        result = env.step(_zero_action(env))
        assert np.all(result.privileged.ee_forces == 0.0)


def test_applied_forces_respect_torque_limits(humanoid):
    env = DeskEnv(humanoid, EnvConfig(), CurriculumConfig(), num_envs=8, seed=3)
    env.set_force_scale(1.0)
    rng = np.random.default_rng(5)
    seen_force = False
    for _ in range(60):
        apply_external_forces(env, 1.0)
        _check_holding_torques(env)
        seen_force |= bool(np.any(env.state.applied_force != 0.0))
        env.step(rng.uniform(-1, 1, size=(8, humanoid.dof)))
    assert seen_force


def test_naive_forces_stay_in_wide_box(humanoid):
    env = DeskEnv(humanoid, EnvConfig(), CurriculumConfig(), num_envs=4, seed=2, force_mode="naive")
    env.set_force_scale(1.0)
    for _ in range(30):
        env.step(_zero_action(env))
        forces = env.state.applied_force
        assert np.all(forces >= WIDE_CLIP[0] - 1e-9) and np.all(forces <= WIDE_CLIP[1] + 1e-9)


def test_infeasible_gravity_zeroes_force(humanoid):
    cfg = EnvConfig(gravity=(0.0, 0.0, -500.0), randomization=RandomizationConfig(enabled=False))
    env = DeskEnv(humanoid, cfg, CurriculumConfig(), num_envs=2, seed=0)
    apply_external_forces(env, 1.0)
    assert env.infeasible_count > 0
    np.testing.assert_array_equal(env.state.applied_force, 0.0)
    np.testing.assert_array_equal(env.state.feasibility_scale, 0.0)


def test_constant_force_deflection_matches_static_equilibrium(humanoid, quiet_env_cfg):
    env = DeskEnv(humanoid, quiet_env_cfg, CurriculumConfig(), num_envs=1, seed=0, force_mode="none")
    force = np.array([0.0, 0.0, -20.0])
    env.set_force_override(np.broadcast_to(force, (1, 2, 3)), application_fraction=1.0)
    for _ in range(150):
        env.step(_zero_action(env))
    q = env.state.q[0]
    dq = q - humanoid.upper_default_positions
    for s, arm in enumerate(humanoid.arms):
        sl = env.arm_slices[s]
        kp = arm.kp
        # Exact equilibrium at the deflected pose.
        kin = chain_kinematics(arm, q[sl])
        np.testing.assert_allclose(kp * dq[sl], jacobian_at(kin, kin.distal_point).T @ force, rtol=0.02, atol=1e-3)
        # Linear prediction from the undeflected pose.
        kin0 = chain_kinematics(arm, humanoid.upper_default_positions[sl])
        predicted = jacobian_at(kin0, kin0.distal_point).T @ force / kp
        assert np.linalg.norm(dq[sl] - predicted) <= 0.2 * np.linalg.norm(predicted)


def test_oracle_tracking_error_is_small(humanoid, quiet_env_cfg):
    env = DeskEnv(humanoid, quiet_env_cfg, CurriculumConfig(), num_envs=2, seed=4, force_mode="none")
    kd = np.concatenate([a.kd + a.frictions for a in humanoid.arms])
    errors = []
    for _ in range(250):
        action = _zero_action(env)
        action[:, LOWER_DOF:] = (env.upper_reference() - humanoid.upper_default_positions) / quiet_env_cfg.upper_action_scale
        env.step(action, kd * env.upper_reference_velocity())
        errors.append(env.last_step_errors["upper"])
    assert float(np.mean(errors)) < 0.02


def test_episode_bookkeeping(humanoid):
    cfg = EnvConfig(episode_length_s=0.2)
    env = DeskEnv(humanoid, cfg, CurriculumConfig(), num_envs=2, seed=0)
    done_seen = False
    for _ in range(cfg.max_episode_steps):
        done_seen |= bool(np.any(env.step(_zero_action(env)).done))
    assert done_seen
    episodes = env.pop_completed_episodes()
    assert len(episodes) == 2
    for ep in episodes:
        assert ep["length"] == cfg.max_episode_steps
        assert ep["e_root"] == pytest.approx((2 * ep["e_root_lin"] + ep["e_root_ang"]) / 3)
        assert 0.0 <= ep["feasibility"] <= 1.0
    assert env.pop_completed_episodes() == []
    np.testing.assert_array_equal(env.state.episode_step, 0)


def test_trajectory_dump(humanoid, tmp_path):
    cfg = EnvConfig(episode_length_s=0.1)
    recorder = TrajectoryRecorder(tmp_path, "abc123")
    env = DeskEnv(humanoid, cfg, CurriculumConfig(), num_envs=1, recorder=recorder)
    for _ in range(cfg.max_episode_steps):
        env.step(_zero_action(env))
    path = tmp_path / "episode_0000.txt"
    assert path.exists()
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "# forceadapt-trajectory format=1 config_hash=abc123 episode=0"
    frame = pd.read_csv(path, sep=" ", comment="#")
    assert len(frame) == cfg.max_episode_steps
    assert {"q_left_elbow", "qref_left_elbow", "f_right_z", "r_upper.upper_dofs", "r_lower.alive"} <= set(frame.columns)


def test_minimum_jerk_profile():
    start, end = np.zeros(2), np.array([1.0, -2.0])
    np.testing.assert_allclose(minimum_jerk(start, end, 0.0), start)
    np.testing.assert_allclose(minimum_jerk(start, end, 1.0), end)
    np.testing.assert_allclose(minimum_jerk(start, end, 0.5), 0.5 * end)
    np.testing.assert_allclose(minimum_jerk_velocity(start, end, 2.0, 0.0), 0.0)
    np.testing.assert_allclose(minimum_jerk_velocity(start, end, 2.0, 1.0), 0.0)
    segment = MinJerkSegment(start, end, duration=2.0, elapsed=1.0)
    np.testing.assert_allclose(segment.target().target_joints, 0.5 * end)
    np.testing.assert_allclose(segment.velocity(), end * 30 / 16 / 2.0)


def test_goal_sampling(humanoid, rng):
    cfg = EnvConfig()
    stance = 0
    for _ in range(2000):
        goal = sample_lower_goal(rng, cfg, humanoid.base.default_height)
        if goal.stance_flag:
            stance += 1
            assert np.all(goal.lin_vel_xy == 0.0) and goal.ang_vel_yaw == 0.0
        lo, hi = cfg.root_height_range
        assert lo * 0.75 <= goal.root_height <= hi * 0.75
        q = sample_waypoint(rng, humanoid, cfg)
        assert np.all(q >= humanoid.upper_lower_limits) and np.all(q <= humanoid.upper_upper_limits)
    assert stance / 2000 == pytest.approx(cfg.stance_probability, abs=0.04)
    lower, segment = sample_goals(rng, cfg, humanoid)
    np.testing.assert_array_equal(segment.start, humanoid.upper_default_positions)
    assert lower.as_vector(0.75).shape == (6,)


def test_randomization_ranges(humanoid, rng):
    cfg = RandomizationConfig()
    for _ in range(100):
        draw = randomize(rng, humanoid, cfg)
        assert cfg.friction[0] <= draw.friction <= cfg.friction[1]
        assert np.all(draw.link_mass_scale >= cfg.link_mass_scale[0])
        assert 0 <= draw.delay_steps <= max_delay_steps(EnvConfig())
    off = randomize(rng, humanoid, RandomizationConfig(enabled=False))
    assert off.friction == 1.0 and off.delay_steps == 0 and np.isinf(off.push_interval_s)
    np.testing.assert_array_equal(off.kp_scale, 1.0)


def test_projected_gravity_tilt():
    np.testing.assert_allclose(projected_gravity(np.zeros((1, 2))), [[0.0, 0.0, -1.0]])
    g = projected_gravity(np.array([[0.3, -0.2]]))
    np.testing.assert_allclose(np.linalg.norm(g, axis=-1), 1.0)


def _reward_inputs(E=2, n_u=8):
    z = np.zeros
    return RewardInputs(
        base_lin_vel=z((E, 3)), yaw_rate=z(E), base_height=np.full(E, 0.75), tilt=z((E, 2)), heading_offset=z(E),
        support_force=np.full(E, 300.0), stance_drift=z((E, 2)), cmd_lin_vel=z((E, 2)), cmd_yaw_rate=z(E),
        cmd_height=np.full(E, 0.75), cmd_waist_yaw=z(E), stance=np.zeros(E, dtype=bool), q_upper=z((E, n_u)),
        q_upper_ref=z((E, n_u)), upper_torque=z((E, n_u)), joint_limit_violation=z(E),
        action=z((E, 4 + n_u)), prev_action=z((E, 4 + n_u)),
    )


def test_reward_streams_sum_their_terms():
    cfg = RewardConfig()
    r_lower, r_upper, terms = compute_rewards(_reward_inputs(), cfg)
    lower_sum = sum(v for k, v in terms.items() if k.startswith("lower."))
    upper_sum = sum(v for k, v in terms.items() if k.startswith("upper."))
    np.testing.assert_allclose(r_lower, lower_sum)
    np.testing.assert_allclose(r_upper, upper_sum)
    # Perfect tracking: every task term at its maximum, no penalties.
    expected_lower = cfg.lin_vel_x + cfg.lin_vel_y + cfg.ang_vel + cfg.walk_height + cfg.waist_dofs + cfg.alive
    np.testing.assert_allclose(r_lower, expected_lower)
    np.testing.assert_allclose(r_upper, cfg.upper_dofs)


def test_upper_action_changes_only_upper_reward():
    inp = _reward_inputs()
    base_lower, base_upper, _ = compute_rewards(inp, RewardConfig())
    inp.action[:, 6] = 1.0
    r_lower, r_upper, _ = compute_rewards(inp, RewardConfig())
    np.testing.assert_allclose(r_lower, base_lower)
    assert np.all(r_upper < base_upper)


def test_proxy_terms_can_be_disabled():
    _, _, terms = compute_rewards(_reward_inputs(), RewardConfig(proxy_terms_enabled=False))
    assert not any("proxy_" in k for k in terms)
    _, _, terms = compute_rewards(_reward_inputs(), RewardConfig())
    assert "lower.proxy_stance_root" in terms


def test_upper_targets_do_not_change_lower_reward():
    inp = _reward_inputs()
    base_lower, base_upper, _ = compute_rewards(inp, RewardConfig())
    inp.q_upper_ref = np.random.default_rng(0).uniform(-0.5, 0.5, size=inp.q_upper_ref.shape)
    r_lower, r_upper, _ = compute_rewards(inp, RewardConfig())
    np.testing.assert_array_equal(r_lower, base_lower)
    assert np.all(r_upper < base_upper)


def test_stance_and_idle_proxies():
    cfg = RewardConfig()
    inp = _reward_inputs()
    inp.stance[:] = True
    inp.base_lin_vel[:, :2] = [0.3, 0.4]
    inp.stance_drift[:] = [0.0, 0.2]
    _, _, terms = compute_rewards(inp, cfg)
    np.testing.assert_allclose(terms["lower.proxy_stance_root"], cfg.stance_root * 0.5)
    np.testing.assert_allclose(terms["lower.proxy_stance_tap_feet"], cfg.stance_tap_feet * 0.2)

    inp = _reward_inputs()
    inp.action[:, :LOWER_DOF] = 0.5
    _, _, terms = compute_rewards(inp, cfg)
    np.testing.assert_allclose(terms["lower.proxy_stand_still"], cfg.stand_still * 2.0)
    inp.cmd_lin_vel[:] = [0.5, 0.0]
    _, _, terms = compute_rewards(inp, cfg)
    np.testing.assert_array_equal(terms["lower.proxy_stand_still"], 0.0)


def test_history_shifts_one_slot_per_step(humanoid, quiet_env_cfg):
    env = DeskEnv(humanoid, quiet_env_cfg, CurriculumConfig(), num_envs=2, seed=0)
    rng = np.random.default_rng(1)
    before = env.observation
    for _ in range(7):
        action = rng.uniform(-0.1, 0.1, size=(2, humanoid.dof))
        result = env.step(action)
        assert not result.done.any()
        after = result.observation
        for old, new in zip(before._fields(), after._fields()):
            np.testing.assert_array_equal(new[:, :-1], old[:, 1:])
        np.testing.assert_array_equal(after.prev_action_hist[:, -1], action)
        np.testing.assert_array_equal(after.joint_pos_hist[:, -1, LOWER_DOF:], env.state.q)
        np.testing.assert_array_equal(after.joint_vel_hist[:, -1, LOWER_DOF:], env.state.qd)
        before = after


def _arm_kinetic_energy(env):
    return 0.5 * np.sum(env._inertia * env.state.qd**2, axis=-1)


def test_resting_arm_gains_no_kinetic_energy(humanoid, quiet_env_cfg):
    env = DeskEnv(humanoid, quiet_env_cfg, CurriculumConfig(), num_envs=2, seed=0, force_mode="none")
    energy = _arm_kinetic_energy(env)
    for _ in range(100):
        env.step(_zero_action(env))
        now = _arm_kinetic_energy(env)
        assert np.all(now <= energy + 1e-6)
        energy = now


def test_friction_dissipates_free_arm_energy():
    inertia, friction = np.array([0.05, 0.1]), np.array([0.1, 0.2])
    q, qd = np.zeros((1, 2)), np.array([[2.0, -1.0]])
    zero = np.zeros((1, 2))
    energy = 0.5 * np.sum(inertia * qd**2)
    for _ in range(500):
        q, qd = integrate_arm(q, qd, zero, zero, zero, inertia, friction, -100.0 * np.ones(2), 100.0 * np.ones(2), 1e4, 0.005)
        now = 0.5 * np.sum(inertia * qd**2)
        assert now <= energy + 1e-12
        energy = now
    assert energy < 0.5 * 0.5 * np.sum(inertia * np.array([2.0, -1.0]) ** 2)


@pytest.mark.slow
def test_applied_forces_respect_torque_limits_long_run(humanoid):
    env = DeskEnv(humanoid, EnvConfig(), CurriculumConfig(), num_envs=64, seed=11)
    env.set_force_scale(1.0)
    rng = np.random.default_rng(12)
    for _ in range(400):
        apply_external_forces(env, 1.0)
        _check_holding_torques(env)
        env.step(rng.uniform(-1, 1, size=(64, humanoid.dof)))
