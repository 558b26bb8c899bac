import numpy as np
import pytest

from forceadapt.config import CurriculumConfig
from forceadapt.controllers import UpperJointController
from forceadapt.errors import ConfigError
from forceadapt.sim_env import LOWER_DOF, DeskEnv


class _PerfectEstimator:
    """Stands in for a trained estimator; the tests pass the true force directly."""


def test_pd_actions_reach_targets(humanoid):
    ctrl = UpperJointController("pd", humanoid, action_scale=0.5)
    targets = humanoid.upper_default_positions + 0.1
    actions, ff = ctrl.compute(targets, np.zeros((1, 8)), 0.02)
    np.testing.assert_allclose(actions, np.full((1, 8), 0.2))
    np.testing.assert_array_equal(ff, 0.0)


def test_pid_integral_is_bounded_and_resettable(humanoid):
    ctrl = UpperJointController("pid", humanoid, action_scale=0.5, ki=20.0, integral_limit=1.0)
    targets = np.broadcast_to(humanoid.upper_default_positions, (2, 8))
    q = targets - 0.5
    for _ in range(100):
        _, ff = ctrl.compute(targets, q, 0.02)
    np.testing.assert_allclose(ff, 1.0)
    ctrl.reset_indices(np.array([True, False]))
    np.testing.assert_array_equal(ctrl.integral[0], 0.0)
    np.testing.assert_allclose(ctrl.integral[1], 1.0)


def test_pd_id_needs_an_estimator(humanoid):
    with pytest.raises(ConfigError):
        UpperJointController("pd_id", humanoid, action_scale=0.5)
    with pytest.raises(ConfigError):
        UpperJointController("lqr", humanoid, action_scale=0.5)


def test_compensation_cancels_force_torque(humanoid, rng):
    ctrl = UpperJointController("pd_id", humanoid, action_scale=0.5, estimator=_PerfectEstimator())
    J = rng.normal(size=(3, 2, 3, 4))
    F = rng.normal(size=(3, 2, 3))
    comp = ctrl.compensation(J, F)
    for s in range(2):
        external = np.einsum("eij,ei->ej", J[:, s], F[:, s])
        np.testing.assert_allclose(comp[:, 4 * s:4 * s + 4] + external, 0.0, atol=1e-12)
    with pytest.raises(ConfigError):
        ctrl.compute(humanoid.upper_default_positions, np.zeros((1, 8)), 0.02)


def _steady_state_error(model, cfg, mode):
    env = DeskEnv(model, cfg, CurriculumConfig(), num_envs=1, seed=0, force_mode="none")
    force = np.array([[[0.0, 10.0, 0.0]]])
    # Fraction 0.6 puts the contact at the link CoM, where compensation is computed.
    env.set_force_override(force, application_fraction=0.6)
    estimator = _PerfectEstimator() if mode == "pd_id" else None
    ctrl = UpperJointController(mode, model, cfg.upper_action_scale, estimator=estimator)
    targets = model.upper_default_positions[None, :]
    for _ in range(100):
        upper, ff = ctrl.compute(targets, env.state.q, cfg.policy_dt, env.ee_jacobians(), force)
        action = np.zeros((1, env.n))
        action[:, LOWER_DOF:] = upper
        env.step(action, ff)
    return float(np.abs(env.state.q[0] - targets[0]).max())


def test_force_compensation_beats_plain_pd(one_joint, quiet_env_cfg):
    pd = _steady_state_error(one_joint, quiet_env_cfg, "pd")
    pd_id = _steady_state_error(one_joint, quiet_env_cfg, "pd_id")
    # kp q = 3 cos q with a 10 N push 0.3 m out.
    assert pd == pytest.approx(0.146, abs=0.01)
    assert pd_id * 5 <= pd
