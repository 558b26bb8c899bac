import numpy as np
import pytest

from forceadapt.kinematics import (
    GRAVITY,
    ArmPose,
    FramePlacement,
    chain_kinematics,
    clamp_to_torque_limits,
    ee_com_jacobian,
    forward_kinematics,
    gravity_torque,
    gravity_torque_from,
    jacobian_at,
    point_jacobian,
)
from forceadapt.sim_env import integrate_arm


def _random_pose(rng, arm):
    return rng.uniform(arm.lower_limits, arm.upper_limits)


def _attached_point(arm, q, local):
    kin = chain_kinematics(arm, q)
    return kin.joint_origins[-1] + kin.link_rotations[-1] @ local


def _potential(arm, q, masses):
    kin = chain_kinematics(arm, q)
    return -float(np.sum(masses[:, None] * kin.link_coms * GRAVITY))


def test_toy_arm_horizontal_pose(toy_arm):
    kin = forward_kinematics(toy_arm, ArmPose("left", np.zeros(2)))
    np.testing.assert_allclose(kin.distal_point, [0.6, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(kin.ee_com, [0.45, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(kin.wrist_origin, [0.3, 0.0, 0.0], atol=1e-12)
    tau = gravity_torque(toy_arm, ArmPose("left", np.zeros(2)))
    np.testing.assert_allclose(tau, [0.6 * 9.81, 0.15 * 9.81], rtol=1e-12)


def test_toy_arm_hanging_pose_has_no_gravity_torque(toy_arm):
    pose = ArmPose("left", np.array([-np.pi / 2, 0.0]))
    kin = forward_kinematics(toy_arm, pose)
    np.testing.assert_allclose(kin.distal_point, [0.0, 0.0, -0.6], atol=1e-12)
    np.testing.assert_allclose(gravity_torque(toy_arm, pose), 0.0, atol=1e-12)


def test_point_jacobian_matches_finite_differences(humanoid, rng):
    h = 1e-6
    for _ in range(100):
        arm = humanoid.arms[rng.integers(len(humanoid.arms))]
        q = _random_pose(rng, arm)
        local = rng.uniform(-0.2, 0.2, size=3)
        J = point_jacobian(humanoid, ArmPose(arm.side, q), _attached_point(arm, q, local))
        fd = np.zeros_like(J)
        for j in range(arm.dof):
            dq = np.zeros(arm.dof)
            dq[j] = h
            fd[:, j] = (_attached_point(arm, q + dq, local) - _attached_point(arm, q - dq, local)) / (2 * h)
        np.testing.assert_allclose(J, fd, rtol=1e-5, atol=1e-8)


def test_gravity_torque_is_potential_gradient(humanoid, rng):
    h = 1e-6
    for _ in range(100):
        arm = humanoid.arms[rng.integers(len(humanoid.arms))]
        q = _random_pose(rng, arm)
        masses = arm.masses
        tau = gravity_torque(humanoid, ArmPose(arm.side, q))
        grad = np.zeros(arm.dof)
        for j in range(arm.dof):
            dq = np.zeros(arm.dof)
            dq[j] = h
            grad[j] = (_potential(arm, q + dq, masses) - _potential(arm, q - dq, masses)) / (2 * h)
        np.testing.assert_allclose(tau, grad, rtol=1e-5, atol=1e-8)


def test_batched_evaluation_matches_single(humanoid, rng):
    arm = humanoid.arm("right")
    qs = np.stack([_random_pose(rng, arm) for _ in range(5)])
    kin = chain_kinematics(arm, qs)
    tau = gravity_torque_from(kin, arm.masses)
    J = jacobian_at(kin, kin.ee_com)
    assert J.shape == (5, 3, arm.dof)
    for i, q in enumerate(qs):
        pose = ArmPose("right", q)
        np.testing.assert_allclose(J[i], ee_com_jacobian(humanoid, pose), atol=1e-12)
        np.testing.assert_allclose(tau[i], gravity_torque(humanoid, pose), atol=1e-12)


def test_link_rotations_are_orthonormal(humanoid, rng):
    arm = humanoid.arm("left")
    kin = forward_kinematics(humanoid, ArmPose("left", _random_pose(rng, arm)))
    assert all(p.is_orthonormal() for p in kin.placements)


def test_base_placement_moves_the_chain(humanoid, rng):
    arm = humanoid.arm("left")
    q = _random_pose(rng, arm)
    base = FramePlacement.from_yaw([1.0, 2.0, 0.5], 0.7)
    local = forward_kinematics(humanoid, ArmPose("left", q))
    world = forward_kinematics(humanoid, ArmPose("left", q), base)
    np.testing.assert_allclose(world.distal_point, base.apply(local.distal_point), atol=1e-12)
    # Gravity is along world z, so a yaw about z leaves the holding torque unchanged.
    np.testing.assert_allclose(
        gravity_torque(humanoid, ArmPose("left", q), base=base), gravity_torque(humanoid, ArmPose("left", q)), atol=1e-10
    )


def test_frame_composition():
    a = FramePlacement.from_yaw([1.0, 0.0, 0.0], np.pi / 2)
    b = FramePlacement.from_yaw([0.0, 1.0, 0.0], 0.0)
    composed = a.compose(b)
    np.testing.assert_allclose(composed.apply(np.zeros(3)), [0.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(composed.as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-12)


def test_pose_width_mismatch(humanoid):
    with pytest.raises(ValueError):
        forward_kinematics(humanoid, ArmPose("left", np.zeros(3)))


def test_limit_violations_reported_not_raised(toy_arm):
    flags = ArmPose("left", np.array([3.5, 0.0])).limit_violations(toy_arm)
    np.testing.assert_array_equal(flags, [True, False])


def test_clamp_to_torque_limits(humanoid):
    tau = np.full(8, 100.0)
    np.testing.assert_array_equal(clamp_to_torque_limits(humanoid, tau), humanoid.upper_torque_limits)
    np.testing.assert_array_equal(clamp_to_torque_limits(humanoid, -tau[:4], "left"), -humanoid.arm("left").torque_limits)


def test_gravity_holding_torque_keeps_pose_static(humanoid, rng):
    arm = humanoid.arm("left")
    q = _random_pose(rng, arm)
    qd = np.zeros(arm.dof)
    q0 = q.copy()
    dt = 0.005
    for _ in range(200):
        tau_g = gravity_torque_from(chain_kinematics(arm, q), arm.masses)
        hold = gravity_torque_from(chain_kinematics(arm, q0), arm.masses)
        q, qd = integrate_arm(
            q, qd, hold, tau_g, np.zeros(arm.dof), arm.inertias, arm.frictions,
            arm.lower_limits, arm.upper_limits, 50.0, dt,
        )
    assert np.max(np.abs(q - q0)) < 1e-3
