import numpy as np
import pytest

from forceadapt.config import CurriculumConfig, EnvConfig, EvalConfig, ExperimentConfig, RandomizationConfig, TrainerConfig
from forceadapt.robot_model import builtin_model, parse_model

# Single joint about z, so gravity produces no joint torque.
ONE_JOINT_RIG = """
[base]
name = "one-joint"
mass = 20.0
inertia = [1.0, 1.0, 1.0]
default_height = 0.75
floating = true
lower_dof_count = 4

[[arm]]
side = "left"
mount = [0.0, 0.0, 0.3]
root_joint = "yaw"
ee_link = "stick"
distal_offset = [0.5, 0.0, 0.0]

[[joint]]
name = "yaw"
parent = "base"
axis = [0.0, 0.0, 1.0]
position_limits = [-1.5, 1.5]
torque_limit = 40.0
default_position = 0.0
pd_gains = [20.0, 1.0]
effective_inertia = 0.05
viscous_friction = 0.1

[[link]]
name = "stick"
joint = "yaw"
mass = 0.5
com_offset = [0.3, 0.0, 0.0]
"""


@pytest.fixture(scope="session")
def toy_arm():
    return builtin_model("toy-arm")


@pytest.fixture(scope="session")
def humanoid():
    return builtin_model("mini-humanoid")


@pytest.fixture(scope="session")
def one_joint():
    return parse_model(ONE_JOINT_RIG, source="one-joint")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def quiet_env_cfg():
    """No gravity, no randomization, long episodes: a disturbance-free rig."""
    return EnvConfig(
        gravity=(0.0, 0.0, 0.0),
        randomization=RandomizationConfig(enabled=False),
        episode_length_s=100.0,
        reset_noise=0.0,
    )


@pytest.fixture
def small_cfg():
    return ExperimentConfig(
        train=TrainerConfig(num_envs=2, rollout_steps=8, total_steps=64, hidden=[16, 16], epochs=2, minibatches=2, checkpoint_every=1),
        env=EnvConfig(episode_length_s=1.0),
        curriculum=CurriculumConfig(window=2),
        eval=EvalConfig(episodes=2, episode_length_s=0.4, num_envs=2),
    )
