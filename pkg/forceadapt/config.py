# forceadapt/config.py
import hashlib
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import toml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError

# --- Setup ---
load_dotenv()


class Settings(BaseSettings):
    """Process-level settings, read from FORCEADAPT_* environment variables or .env."""

    model_config = SettingsConfigDict(env_prefix="FORCEADAPT_", extra="ignore")

    log_level: str = "INFO"
    progress: bool = True
    torch_threads: int = 1
    runs_dir: Path = Path("runs")
    models_dir: Optional[Path] = None


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Range = Tuple[float, float]
Mode = Literal["falcon", "monolithic", "upper_pd", "upper_pid", "upper_pd_id"]
CurriculumMode = Literal["on", "off", "naive"]

# --- Force curriculum ---

class CurriculumConfig(_Section):
    epsilon: float = Field(1e-6, gt=0)
    concentration: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    clip_range: Literal["narrow", "wide"] = "narrow"
    alpha_init: float = Field(0.0, ge=0, le=1)
    promote_threshold: float = 0.25
    demote_threshold: float = 0.5
    step_size: float = Field(0.05, gt=0, le=1)
    window: int = Field(50, ge=1)
    min_window_fill: int = Field(1, ge=1)
    filter_beta: float = Field(0.9, ge=0, lt=1)
    resample_interval_s: Range = (2.0, 5.0)
    walking_deadband: float = 0.05
    randomize_application_point: bool = True

    @model_validator(mode="after")
    def _check(self) -> "CurriculumConfig":
        if any(c <= 0 for c in self.concentration):
            raise ValueError("concentration must be strictly positive")
        if self.promote_threshold > self.demote_threshold:
            raise ValueError("promote_threshold must not exceed demote_threshold")
        return self


# --- Environment ---

class RandomizationConfig(_Section):
    enabled: bool = True
    friction: Range = (0.5, 1.25)
    link_mass_scale: Range = (0.9, 1.2)
    base_mass_delta: Range = (-1.0, 3.0)
    kp_scale: Range = (0.9, 1.1)
    kd_scale: Range = (0.9, 1.1)
    control_delay_ms: Range = (0.0, 20.0)
    push_interval_s: float = 5.0
    push_velocity: float = 1.0


class RewardConfig(_Section):
    # Task terms
    lin_vel_x: float = 2.0
    lin_vel_y: float = 1.5
    ang_vel: float = 4.0
    walk_height: float = 2.0
    waist_dofs: float = 2.0
    upper_dofs: float = 4.0
    # Penalties. The base has no legs, so each legged term is a base-level
    # proxy (reported as `proxy_<name>`):
    #   hip_pos          base tilt norm
    #   negative_knee    base more than 0.1 m below the commanded height
    #   stance_tap_feet  planar drift from the stance anchor while in stance
    #   stance_root      planar base speed while in stance
    #   stand_still      lower-action magnitude while the velocity command is idle
    #   ankle_roll       absolute base roll
    hip_pos: float = -2.5
    negative_knee: float = -1.0
    stance_tap_feet: float = -5.0
    stance_root: float = -5.0
    stand_still: float = -0.15
    ankle_roll: float = -2.0
    # Regularizers
    action_rate: float = -0.01
    torque: float = -1e-5
    joint_limit: float = -5.0
    alive: float = 0.5
    proxy_terms_enabled: bool = True


class ObservationScales(_Section):
    joint_pos: float = 1.0
    joint_vel: float = 0.05
    root_ang_vel: float = 0.25
    projected_gravity: float = 1.0
    action: float = 1.0
    lin_vel: float = 2.0
    force: float = 0.02


class BaseDynamicsConfig(_Section):
    lin_vel_gain: float = 8.0
    yaw_rate_gain: float = 8.0
    max_yaw_torque: float = 60.0
    yaw_inertia: float = 1.5
    leg_stiffness: float = 8000.0
    leg_damping: float = 1000.0
    tilt_inertia: float = 2.0
    tilt_stiffness: float = 400.0
    tilt_damping: float = 40.0
    joint_stop_stiffness: float = 50.0


class EnvConfig(_Section):
    model: str = "mini-humanoid"
    sim_dt: float = Field(0.005, gt=0)
    decimation: int = Field(4, ge=1)
    episode_length_s: float = 20.0
    history_length: int = Field(5, ge=1)
    upper_action_scale: float = 0.5
    lower_action_scale: Tuple[float, float, float, float] = (1.0, 0.5, 0.5, 1.0)
    lin_vel_x_range: Range = (-1.0, 1.0)
    lin_vel_y_range: Range = (-0.5, 0.5)
    ang_vel_yaw_range: Range = (-0.5, 0.5)
    stance_probability: float = Field(0.3, ge=0, le=1)
    root_height_range: Range = (0.6, 1.05)
    waist_yaw_range: float = 0.6
    lower_resample_s: Range = (5.0, 10.0)
    waypoint_interval_s: Range = (1.0, 3.0)
    waypoint_range_fraction: float = Field(0.5, gt=0, le=1)
    reset_noise: float = 0.05
    fall_height_fraction: float = 0.3
    fall_tilt: float = 1.0
    gravity: Tuple[float, float, float] = (0.0, 0.0, -9.81)
    randomization: RandomizationConfig = RandomizationConfig()
    rewards: RewardConfig = RewardConfig()
    obs_scales: ObservationScales = ObservationScales()
    base_dynamics: BaseDynamicsConfig = BaseDynamicsConfig()

    @model_validator(mode="after")
    def _check(self) -> "EnvConfig":
        lo, hi = self.root_height_range
        if not 0.4 <= lo <= hi <= 1.2:
            raise ValueError("root_height_range must lie within [0.4, 1.2] x default height")
        return self

    @property
    def policy_dt(self) -> float:
        return self.sim_dt * self.decimation

    @property
    def max_episode_steps(self) -> int:
        return int(round(self.episode_length_s / self.policy_dt))


# --- Trainer ---

class TrainerConfig(_Section):
    mode: Mode = "falcon"
    force_curriculum: CurriculumMode = "on"
    gamma: float = 0.99
    lam: float = 0.95
    clip_ratio: float = Field(0.2, ge=0)
    entropy_coef: float = 0.005
    value_coef: float = 1.0
    learning_rate: float = 3e-4
    lr_decay: bool = True
    epochs: int = Field(5, ge=1)
    minibatches: int = Field(4, ge=1)
    num_envs: int = Field(256, ge=1)
    rollout_steps: int = Field(24, ge=1)
    total_steps: int = Field(2_000_000, ge=1)
    hidden: List[int] = [512, 256, 128]
    init_log_std: float = -0.7
    max_grad_norm: float = 1.0
    normalize_advantage: bool = True
    seed: int = 0
    # Upper-IK baselines
    pid_ki: float = 20.0
    pid_integral_limit: float = 5.0
    estimator_hidden: List[int] = [256, 128]
    estimator_learning_rate: float = 1e-3
    estimator_epochs: int = 2
    checkpoint_every: int = Field(50, ge=1)

    @property
    def steps_per_update(self) -> int:
        return self.num_envs * self.rollout_steps

    @property
    def num_updates(self) -> int:
        return max(1, self.total_steps // self.steps_per_update)


# --- Evaluation ---

class EvalConfig(_Section):
    episodes: int = Field(252, ge=1)
    levels: List[float] = [0.0, 0.5, 1.0]
    episode_length_s: float = 10.0
    num_envs: int = Field(64, ge=1)
    seed: int = 0


class ExperimentConfig(_Section):
    train: TrainerConfig = TrainerConfig()
    env: EnvConfig = EnvConfig()
    curriculum: CurriculumConfig = CurriculumConfig()
    eval: EvalConfig = EvalConfig()


# --- Loading ---

def _error_key(err: Dict[str, Any]) -> str:
    return ".".join(str(part) for part in err["loc"])


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = _error_key(first)
        if first["type"] == "extra_forbidden":
            raise ConfigError(f"unknown config key '{key}'", key=key) from e
        raise ConfigError(f"invalid value for '{key}': {first['msg']}", key=key) from e


def load_config(path: Path) -> ExperimentConfig:
    """Reads a TOML experiment config. Unknown keys are hard errors."""
    try:
        data = toml.load(str(path))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except toml.TomlDecodeError as e:
        raise ConfigError(f"config file {path} is not valid TOML: {e}") from e
    return parse_config(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return toml.dumps(cfg.model_dump(mode="json"))


def config_hash(cfg: BaseModel) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
