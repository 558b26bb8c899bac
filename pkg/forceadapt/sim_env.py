# forceadapt/sim_env.py
"""
Desk-scale loco-manipulation surrogate.

A floating base with four actuated twist channels (x, y, z, yaw) carries the
articulated arms of a RobotModel. Arms are integrated with diagonal-inertia
dynamics in the heading frame of the base, with exact gravity torques and
exact Jacobian force transmission. The base tracks twist targets with a
friction-limited wrench, rests on a unilateral leg spring and tilts passively
under the moments of the arms and the external end-effector forces.

`DeskEnv` is vectorized: every array in its state has a leading dimension E,
one row per independent instance, each with its own random stream.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from .config import CurriculumConfig, EnvConfig, ObservationScales, RandomizationConfig, RewardConfig
from .errors import ModelValidationError, NonFiniteError
from .force_curriculum import (
    CLIP_PRESETS,
    WIDE_CLIP,
    ForceEnvelope,
    application_point,
    envelope_bounds,
    force_from_quantiles,
    gravity_feasible,
    low_pass,
    naive_envelope,
    project_feasible,
    sample_ratios,
    walking_projection,
)
from .kinematics import chain_kinematics, gravity_torque_from, jacobian_at
from .robot_model import RobotModel

logger = logging.getLogger(__name__)

LOWER_DOF = 4
ForceMode = Literal["torque_aware", "naive", "none"]


# --- Goal commands ---

@dataclass
class GoalCommandLower:
    lin_vel_xy: np.ndarray
    ang_vel_yaw: float
    stance_flag: bool
    root_height: float
    waist_yaw: float

    def as_vector(self, default_height: float) -> np.ndarray:
        return np.array([
            self.lin_vel_xy[0], self.lin_vel_xy[1], self.ang_vel_yaw,
            float(self.stance_flag), self.root_height / default_height, self.waist_yaw,
        ])


@dataclass
class GoalCommandUpper:
    target_joints: np.ndarray


def minimum_jerk(start: np.ndarray, end: np.ndarray, phase) -> np.ndarray:
    """Quintic blend with zero boundary velocity and acceleration."""
    s = np.clip(np.asarray(phase, dtype=float), 0.0, 1.0)
    blend = 10 * s**3 - 15 * s**4 + 6 * s**5
    return start + (end - start) * np.asarray(blend)[..., None]


def minimum_jerk_velocity(start: np.ndarray, end: np.ndarray, duration, phase) -> np.ndarray:
    s = np.clip(np.asarray(phase, dtype=float), 0.0, 1.0)
    rate = (30 * s**2 - 60 * s**3 + 30 * s**4) / np.asarray(duration, dtype=float)
    return (end - start) * np.asarray(rate)[..., None]


@dataclass
class MinJerkSegment:
    start: np.ndarray
    end: np.ndarray
    duration: float
    elapsed: float = 0.0

    def target(self, t: Optional[float] = None) -> GoalCommandUpper:
        t = self.elapsed if t is None else t
        return GoalCommandUpper(minimum_jerk(self.start, self.end, t / self.duration))

    def velocity(self, t: Optional[float] = None) -> np.ndarray:
        t = self.elapsed if t is None else t
        return minimum_jerk_velocity(self.start, self.end, self.duration, t / self.duration)


def sample_lower_goal(rng: np.random.Generator, cfg: EnvConfig, default_height: float) -> GoalCommandLower:
    stance = bool(rng.random() < cfg.stance_probability)
    if stance:
        vel, yaw_rate = np.zeros(2), 0.0
    else:
        vel = np.array([rng.uniform(*cfg.lin_vel_x_range), rng.uniform(*cfg.lin_vel_y_range)])
        yaw_rate = float(rng.uniform(*cfg.ang_vel_yaw_range))
    height = float(rng.uniform(*cfg.root_height_range)) * default_height
    waist = float(rng.uniform(-cfg.waist_yaw_range, cfg.waist_yaw_range))
    return GoalCommandLower(vel, yaw_rate, stance, height, waist)


def sample_waypoint(rng: np.random.Generator, model: RobotModel, cfg: EnvConfig) -> np.ndarray:
    """Uniform draw inside a shrunken box around the default pose, always within limits."""
    lo, hi, q0 = model.upper_lower_limits, model.upper_upper_limits, model.upper_default_positions
    f = cfg.waypoint_range_fraction
    return rng.uniform(q0 - f * (q0 - lo), q0 + f * (hi - q0))


def sample_goals(
    rng: np.random.Generator, cfg: EnvConfig, model: RobotModel, start: Optional[np.ndarray] = None
) -> Tuple[GoalCommandLower, MinJerkSegment]:
    lower = sample_lower_goal(rng, cfg, model.base.default_height)
    start = model.upper_default_positions if start is None else np.asarray(start, dtype=float)
    segment = MinJerkSegment(start, sample_waypoint(rng, model, cfg), float(rng.uniform(*cfg.waypoint_interval_s)))
    return lower, segment


# --- Domain randomization ---

@dataclass(frozen=True)
class DomainRandomizationDraw:
    friction: float
    link_mass_scale: np.ndarray  # (n_u,)
    base_mass_delta: float
    kp_scale: np.ndarray  # (n,); lower channels scale the base twist gains
    kd_scale: np.ndarray  # (n,); lower z channel scales the leg damping
    delay_steps: int
    push_interval_s: float
    push_velocity: float


def max_delay_steps(cfg: EnvConfig) -> int:
    return int(round(cfg.randomization.control_delay_ms[1] / 1000.0 / cfg.sim_dt))


def randomize(rng: np.random.Generator, model: RobotModel, cfg: RandomizationConfig, sim_dt: float = 0.005) -> DomainRandomizationDraw:
    n, n_u = model.dof, model.upper_dof_count
    if not cfg.enabled:
        return DomainRandomizationDraw(1.0, np.ones(n_u), 0.0, np.ones(n), np.ones(n), 0, math.inf, 0.0)
    delay_s = rng.uniform(*cfg.control_delay_ms) / 1000.0
    return DomainRandomizationDraw(
        friction=float(rng.uniform(*cfg.friction)),
        link_mass_scale=rng.uniform(*cfg.link_mass_scale, size=n_u),
        base_mass_delta=float(rng.uniform(*cfg.base_mass_delta)),
        kp_scale=rng.uniform(*cfg.kp_scale, size=n),
        kd_scale=rng.uniform(*cfg.kd_scale, size=n),
        delay_steps=int(round(delay_s / sim_dt)),
        push_interval_s=cfg.push_interval_s,
        push_velocity=cfg.push_velocity,
    )


# --- Observations ---

@dataclass
class Observation:
    """Five-slot proprioceptive histories, oldest first; leading dim is E."""

    joint_pos_hist: np.ndarray  # (E, H, n)
    joint_vel_hist: np.ndarray  # (E, H, n)
    root_ang_vel_hist: np.ndarray  # (E, H, 3)
    projected_gravity_hist: np.ndarray  # (E, H, 3)
    prev_action_hist: np.ndarray  # (E, H, n)

    def copy(self) -> "Observation":
        return Observation(*(np.array(a) for a in self._fields()))

    def _fields(self):
        return (self.joint_pos_hist, self.joint_vel_hist, self.root_ang_vel_hist, self.projected_gravity_hist, self.prev_action_hist)

    def flatten(self, scales: ObservationScales, joint_offsets: Optional[np.ndarray] = None) -> np.ndarray:
        pos = self.joint_pos_hist if joint_offsets is None else self.joint_pos_hist - joint_offsets
        parts = [
            pos * scales.joint_pos,
            self.joint_vel_hist * scales.joint_vel,
            self.root_ang_vel_hist * scales.root_ang_vel,
            self.projected_gravity_hist * scales.projected_gravity,
            self.prev_action_hist * scales.action,
        ]
        return np.concatenate([p.reshape(p.shape[0], -1) for p in parts], axis=-1)

    def proprioception(self, scales: ObservationScales, lower_dof: int, joint_offsets: Optional[np.ndarray] = None) -> np.ndarray:
        """Estimator input: the same histories with only the lower-body actions."""
        pos = self.joint_pos_hist if joint_offsets is None else self.joint_pos_hist - joint_offsets
        parts = [
            pos * scales.joint_pos,
            self.joint_vel_hist * scales.joint_vel,
            self.root_ang_vel_hist * scales.root_ang_vel,
            self.projected_gravity_hist * scales.projected_gravity,
            self.prev_action_hist[..., :lower_dof] * scales.action,
        ]
        return np.concatenate([p.reshape(p.shape[0], -1) for p in parts], axis=-1)


@dataclass
class PrivilegedObservation:
    root_lin_vel: np.ndarray  # (E, 3) heading frame
    ee_forces: np.ndarray  # (E, 2, 3)

    def flatten(self, scales: ObservationScales) -> np.ndarray:
        return np.concatenate(
            [self.root_lin_vel * scales.lin_vel, self.ee_forces.reshape(self.ee_forces.shape[0], -1) * scales.force], axis=-1
        )


class StepResult(NamedTuple):
    observation: Observation
    privileged: PrivilegedObservation
    reward_lower: np.ndarray
    reward_upper: np.ndarray
    done: np.ndarray


# --- State ---

@dataclass
class EnvState:
    # base
    base_pos: np.ndarray
    yaw: np.ndarray
    base_lin_vel: np.ndarray  # world frame
    yaw_rate: np.ndarray
    tilt: np.ndarray  # (E, 2) roll, pitch
    tilt_rate: np.ndarray
    rest_height: np.ndarray
    support_force: np.ndarray
    # arms
    q: np.ndarray
    qd: np.ndarray
    upper_torque: np.ndarray
    # goals
    cmd_lin_vel: np.ndarray
    cmd_yaw_rate: np.ndarray
    stance: np.ndarray
    cmd_height: np.ndarray
    cmd_waist_yaw: np.ndarray
    heading_ref: np.ndarray
    stance_anchor: np.ndarray
    lower_timer: np.ndarray
    wp_start: np.ndarray
    wp_end: np.ndarray
    wp_duration: np.ndarray
    wp_elapsed: np.ndarray
    # external forces, per EE
    force_timer: np.ndarray
    ratios: np.ndarray
    quantiles: np.ndarray
    application_u: np.ndarray
    filtered_force: np.ndarray
    applied_force: np.ndarray
    feasibility_scale: np.ndarray
    # domain randomization
    friction: np.ndarray
    link_mass_scale: np.ndarray
    base_mass: np.ndarray
    kp_scale: np.ndarray
    kd_scale: np.ndarray
    delay_steps: np.ndarray
    push_interval: np.ndarray
    push_velocity: np.ndarray
    push_timer: np.ndarray
    # bookkeeping
    action_buffer: np.ndarray
    prev_action: np.ndarray
    episode_step: np.ndarray

    @classmethod
    def allocate(cls, num_envs: int, n_upper: int, n_arms: int, max_delay: int) -> "EnvState":
        E, n = num_envs, LOWER_DOF + n_upper
        z = lambda *shape: np.zeros((E,) + shape)
        return cls(
            base_pos=z(3), yaw=z(), base_lin_vel=z(3), yaw_rate=z(), tilt=z(2), tilt_rate=z(2),
            rest_height=z(), support_force=z(),
            q=z(n_upper), qd=z(n_upper), upper_torque=z(n_upper),
            cmd_lin_vel=z(2), cmd_yaw_rate=z(), stance=np.zeros(E, dtype=bool), cmd_height=z(), cmd_waist_yaw=z(),
            heading_ref=z(), stance_anchor=z(2), lower_timer=z(),
            wp_start=z(n_upper), wp_end=z(n_upper), wp_duration=np.ones(E), wp_elapsed=z(),
            force_timer=z(n_arms), ratios=z(n_arms, 3), quantiles=z(n_arms, 3), application_u=np.ones((E, n_arms)),
            filtered_force=z(n_arms, 3), applied_force=z(n_arms, 3), feasibility_scale=np.ones((E, n_arms)),
            friction=np.ones(E), link_mass_scale=np.ones((E, n_upper)), base_mass=z(), kp_scale=np.ones((E, n)),
            kd_scale=np.ones((E, n)), delay_steps=np.zeros(E, dtype=int), push_interval=np.full(E, math.inf),
            push_velocity=z(), push_timer=np.full(E, math.inf),
            action_buffer=z(max_delay + 1, n), prev_action=z(n), episode_step=np.zeros(E, dtype=int),
        )


# --- Dynamics helpers ---

def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def projected_gravity(tilt: np.ndarray) -> np.ndarray:
    """Unit gravity in the base frame for (roll, pitch) tilt."""
    roll, pitch = tilt[..., 0], tilt[..., 1]
    return np.stack([np.sin(pitch), -np.sin(roll) * np.cos(pitch), -np.cos(roll) * np.cos(pitch)], axis=-1)


def integrate_arm(
    q: np.ndarray,
    qd: np.ndarray,
    tau_motor: np.ndarray,
    tau_gravity: np.ndarray,
    tau_external: np.ndarray,
    inertia: np.ndarray,
    friction: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    stop_stiffness: float,
    dt: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """One semi-implicit Euler step of the diagonal-inertia arm model."""
    stop = -stop_stiffness * (q - np.clip(q, lower, upper))
    qdd = (tau_motor - tau_gravity + tau_external + stop - friction * qd) / inertia
    qd = qd + qdd * dt
    return q + qd * dt, qd


# --- Rewards ---

@dataclass
class RewardInputs:
    base_lin_vel: np.ndarray  # (E, 3) heading frame
    yaw_rate: np.ndarray
    base_height: np.ndarray
    tilt: np.ndarray
    heading_offset: np.ndarray
    support_force: np.ndarray
    stance_drift: np.ndarray  # (E, 2) heading frame
    cmd_lin_vel: np.ndarray
    cmd_yaw_rate: np.ndarray
    cmd_height: np.ndarray
    cmd_waist_yaw: np.ndarray
    stance: np.ndarray
    q_upper: np.ndarray
    q_upper_ref: np.ndarray
    upper_torque: np.ndarray
    joint_limit_violation: np.ndarray
    action: np.ndarray
    prev_action: np.ndarray
    lower_dof: int = LOWER_DOF


def compute_rewards(inp: RewardInputs, cfg: RewardConfig) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    """Returns (r_lower, r_upper, terms); each stream is the sum of its `lower.` / `upper.` terms."""
    E = inp.base_lin_vel.shape[0]
    stance = inp.stance.astype(float)
    delta_a = np.square(inp.action - inp.prev_action)
    roll, pitch = inp.tilt[:, 0], inp.tilt[:, 1]
    waist_err = np.square(inp.heading_offset - inp.cmd_waist_yaw) + roll**2 + pitch**2
    upper_err = np.sum(np.square(inp.q_upper - inp.q_upper_ref), axis=-1)

    lower = {
        "lin_vel_x": cfg.lin_vel_x * np.exp(-4.0 * np.abs(inp.base_lin_vel[:, 0] - inp.cmd_lin_vel[:, 0])),
        "lin_vel_y": cfg.lin_vel_y * np.exp(-4.0 * np.abs(inp.base_lin_vel[:, 1] - inp.cmd_lin_vel[:, 1])),
        "ang_vel": cfg.ang_vel * np.exp(-4.0 * np.abs(inp.yaw_rate - inp.cmd_yaw_rate)),
        "walk_height": cfg.walk_height * np.exp(-np.abs(inp.cmd_height - inp.base_height) / 0.05),
        "waist_dofs": cfg.waist_dofs * np.exp(-waist_err / 0.05),
    }
    if cfg.proxy_terms_enabled:
        idle = (np.linalg.norm(inp.cmd_lin_vel, axis=-1) < 0.1) & (np.abs(inp.cmd_yaw_rate) < 0.1)
        lower.update({
            "proxy_hip_pos": cfg.hip_pos * np.linalg.norm(inp.tilt, axis=-1),
            "proxy_negative_knee": cfg.negative_knee * (inp.base_height < inp.cmd_height - 0.1),
            "proxy_stance_tap_feet": cfg.stance_tap_feet * stance * np.linalg.norm(inp.stance_drift, axis=-1),
            "proxy_stance_root": cfg.stance_root * stance * np.linalg.norm(inp.base_lin_vel[:, :2], axis=-1),
            "proxy_stand_still": cfg.stand_still * idle * np.sum(np.abs(inp.action[:, : inp.lower_dof]), axis=-1),
            "proxy_ankle_roll": cfg.ankle_roll * np.abs(roll),
        })
    lower["action_rate"] = cfg.action_rate * np.sum(delta_a[:, : inp.lower_dof], axis=-1)
    lower["alive"] = np.full(E, cfg.alive)

    upper = {
        "upper_dofs": cfg.upper_dofs * np.exp(-upper_err / 0.01),
        "action_rate": cfg.action_rate * np.sum(delta_a[:, inp.lower_dof:], axis=-1),
        "torque": cfg.torque * np.sum(np.square(inp.upper_torque), axis=-1),
        "joint_limit": cfg.joint_limit * inp.joint_limit_violation,
    }

    terms: Dict[str, np.ndarray] = {}
    r_lower, r_upper = np.zeros(E), np.zeros(E)
    for name, value in lower.items():
        value = np.asarray(value, dtype=float)
        terms[f"lower.{name}"] = value
        r_lower = r_lower + value
    for name, value in upper.items():
        value = np.asarray(value, dtype=float)
        terms[f"upper.{name}"] = value
        r_upper = r_upper + value
    return r_lower, r_upper, terms


# --- Trajectory dump ---

class TrajectoryRecorder:
    """Writes one whitespace-separated text file per episode of one instance."""

    FORMAT_VERSION = 1

    def __init__(self, out_dir: Path, config_hash: str, env_index: int = 0):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.env_index = env_index
        self._rows: List[Dict[str, float]] = []
        self._episode = 0

    def record(self, row: Dict[str, float]) -> None:
        self._rows.append(row)

    def end_episode(self) -> Optional[Path]:
        if not self._rows:
            return None
        path = self.out_dir / f"episode_{self._episode:04d}.txt"
        with path.open("w", encoding="utf-8") as fh:
            fh.write(f"# forceadapt-trajectory format={self.FORMAT_VERSION} config_hash={self.config_hash} episode={self._episode}\n")
            pd.DataFrame(self._rows).to_csv(fh, sep=" ", index=False, float_format="%.9g")
        logger.debug("wrote trajectory %s (%d steps)", path, len(self._rows))
        self._rows = []
        self._episode += 1
        return path


# --- External forces ---

def apply_external_forces(env: "DeskEnv", alpha_g: float) -> EnvState:
    """Runs the force pipeline for every instance and EE; writes applied forces into the state."""
    st = env.state
    if env.force_override is not None:
        st.applied_force[:] = env.force_override
        st.feasibility_scale[:] = 1.0
        return st
    if env.force_mode == "none":
        st.applied_force[:] = 0.0
        st.filtered_force[:] = 0.0
        st.feasibility_scale[:] = 1.0
        return st

    cur = env.curriculum_cfg
    for e, s in zip(*np.nonzero(st.force_timer <= 0.0)):
        rng = env.rngs[e]
        st.ratios[e, s] = sample_ratios(rng, cur.concentration)
        st.quantiles[e, s] = rng.uniform(size=3)
        st.application_u[e, s] = rng.uniform() if cur.randomize_application_point else 1.0
        st.force_timer[e, s] = rng.uniform(*cur.resample_interval_s)
    st.force_timer -= env.cfg.policy_dt

    commanded = np.where(st.stance[:, None], 0.0, st.cmd_lin_vel)
    for s, arm in enumerate(env.model.arms):
        sl = env.arm_slices[s]
        kin = chain_kinematics(arm, st.q[:, sl])
        limits = arm.torque_limits
        tau_g = gravity_torque_from(kin, arm.masses * st.link_mass_scale[:, sl], env.gravity)
        if env.force_mode == "naive":
            envelope = naive_envelope(*WIDE_CLIP)
            feasible = np.ones(env.num_envs, dtype=bool)
        else:
            # Reaction Jacobian: the curriculum constrains tau_g + J^T f with f the force the EE exerts.
            reaction = -jacobian_at(kin, kin.ee_com)
            f_min, f_max = envelope_bounds(reaction, limits, tau_g, cur.epsilon)
            inf = np.full(f_min.shape, np.inf)
            envelope = ForceEnvelope(f_min, f_max, -inf, inf).clipped(*env.clip)
            feasible = gravity_feasible(limits, tau_g)
        raw = force_from_quantiles(envelope, st.ratios[:, s], st.quantiles[:, s])
        raw = walking_projection(raw, commanded, cur.walking_deadband)
        st.filtered_force[:, s] = low_pass(st.filtered_force[:, s], raw, cur.filter_beta)
        target = alpha_g * st.filtered_force[:, s]
        if env.force_mode == "torque_aware":
            point = application_point(kin, st.application_u[:, s])
            applied, scale = project_feasible(-jacobian_at(kin, point), limits, tau_g, target)
        else:
            applied, scale = target, np.ones(env.num_envs)
        if not np.all(feasible):
            count = int(np.sum(~feasible))
            previous = env.infeasible_count
            env.infeasible_count += count
            if previous == 0 or previous // 1000 != env.infeasible_count // 1000:
                logger.warning(
                    "gravity torque exceeds limits on the %s arm in %d instance(s); force zeroed (%d skips so far)",
                    arm.side, count, env.infeasible_count,
                )
            applied = np.where(feasible[:, None], applied, 0.0)
            scale = np.where(feasible, scale, 0.0)
        st.applied_force[:, s] = applied
        st.feasibility_scale[:, s] = scale
    return st


# --- Environment ---

@dataclass
class EpisodeAccumulator:
    upper_error: np.ndarray
    lin_error: np.ndarray
    ang_error: np.ndarray
    feasibility: np.ndarray
    reward_lower: np.ndarray
    reward_upper: np.ndarray

    @classmethod
    def zeros(cls, num_envs: int) -> "EpisodeAccumulator":
        return cls(*(np.zeros(num_envs) for _ in range(6)))

    def clear(self, idx) -> None:
        for arr in (self.upper_error, self.lin_error, self.ang_error, self.feasibility, self.reward_lower, self.reward_upper):
            arr[idx] = 0.0


class DeskEnv:
    def __init__(
        self,
        model: RobotModel,
        cfg: EnvConfig,
        curriculum: CurriculumConfig,
        num_envs: int = 1,
        seed: int = 0,
        force_mode: ForceMode = "torque_aware",
        recorder: Optional[TrajectoryRecorder] = None,
    ):
        if not model.base.floating or model.lower_dof_count != LOWER_DOF:
            raise ModelValidationError(
                f"model '{model.name}' needs a floating base with {LOWER_DOF} lower DoF for the desk environment",
                field="base",
            )
        self.model = model
        self.cfg = cfg
        self.curriculum_cfg = curriculum
        self.num_envs = num_envs
        self.seed = seed
        self.force_mode = force_mode
        self.recorder = recorder
        self.clip = CLIP_PRESETS[curriculum.clip_range]
        self.gravity = np.asarray(cfg.gravity, dtype=float)
        self.default_height = model.base.default_height
        self.n_upper = model.upper_dof_count
        self.n = model.dof
        self.arm_slices = []
        offset = 0
        for arm in model.arms:
            self.arm_slices.append(slice(offset, offset + arm.dof))
            offset += arm.dof
        self.joint_offsets = np.concatenate([np.zeros(LOWER_DOF), model.upper_default_positions])

        self._kp = np.concatenate([a.kp for a in model.arms])
        self._kd = np.concatenate([a.kd for a in model.arms])
        self._inertia = np.concatenate([a.inertias for a in model.arms])
        self._joint_friction = np.concatenate([a.frictions for a in model.arms])
        self._nominal_mass = model.base.mass + float(sum(a.masses.sum() for a in model.arms))
        self._trim_moment = self._arm_gravity_moment(
            np.broadcast_to(model.upper_default_positions, (1, self.n_upper)), np.ones((1, self.n_upper))
        )[0]
        self._max_delay = max_delay_steps(cfg)

        self.alpha_g = 0.0
        self.force_override: Optional[np.ndarray] = None
        self.infeasible_count = 0
        self.last_reward_terms: Dict[str, np.ndarray] = {}
        self.last_step_errors: Dict[str, np.ndarray] = {}
        self._completed: List[Dict[str, float]] = []
        self.rngs: List[np.random.Generator] = []
        self.state = EnvState.allocate(num_envs, self.n_upper, len(model.arms), self._max_delay)
        self._episode = EpisodeAccumulator.zeros(num_envs)
        self._obs: Optional[Observation] = None
        self.reset(seed)

    # --- public API ---

    def set_force_scale(self, alpha_g: float) -> None:
        self.alpha_g = float(np.clip(alpha_g, 0.0, 1.0))

    def set_force_override(self, forces: Optional[np.ndarray], application_fraction: float = 1.0) -> None:
        """Pins the applied EE forces (E, arms, 3) and bypasses the curriculum; None restores it."""
        if forces is None:
            self.force_override = None
            return
        self.force_override = np.broadcast_to(np.asarray(forces, dtype=float), self.state.applied_force.shape).copy()
        self.state.application_u[:] = application_fraction

    def reset(self, seed: Optional[int] = None) -> Observation:
        if seed is not None or not self.rngs:
            self.seed = self.seed if seed is None else seed
            self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(self.num_envs)]
        self._completed = []
        self._reset_indices(np.arange(self.num_envs))
        return self._obs.copy()

    def step(self, action: np.ndarray, upper_feedforward: Optional[np.ndarray] = None) -> StepResult:
        action = np.asarray(action, dtype=float)
        if action.shape != (self.num_envs, self.n):
            raise ValueError(f"action must have shape {(self.num_envs, self.n)}, got {action.shape}")
        if not np.all(np.isfinite(action)):
            bad = np.nonzero(~np.all(np.isfinite(action), axis=-1))[0]
            raise NonFiniteError("non-finite action", diagnostics={"instances": bad.tolist()})
        feedforward = np.zeros((self.num_envs, self.n_upper)) if upper_feedforward is None else np.asarray(upper_feedforward, dtype=float)

        st, cfg = self.state, self.cfg
        self._advance_goals()
        apply_external_forces(self, self.alpha_g)
        rows = np.arange(self.num_envs)
        for _ in range(cfg.decimation):
            st.action_buffer = np.roll(st.action_buffer, 1, axis=1)
            st.action_buffer[:, 0] = action
            self._substep(st.action_buffer[rows, st.delay_steps], feedforward)
        st.episode_step += 1

        reward_inputs = self._reward_inputs(action)
        r_lower, r_upper, terms = compute_rewards(reward_inputs, cfg.rewards)
        self.last_reward_terms = terms
        st.prev_action = action.copy()

        fell = (st.base_pos[:, 2] < cfg.fall_height_fraction * self.default_height) | np.any(np.abs(st.tilt) > cfg.fall_tilt, axis=-1)
        timeout = st.episode_step >= cfg.max_episode_steps
        done = fell | timeout
        self._accumulate(reward_inputs, r_lower, r_upper)
        if self.recorder is not None:
            self._record(action, terms, bool(done[self.recorder.env_index]))

        if np.any(done):
            idx = np.nonzero(done)[0]
            self._finish_episodes(idx, fell)
            self._reset_indices(idx)
        self._push_history(action, ~done)
        return StepResult(self._obs.copy(), self.privileged(), r_lower, r_upper, done)

    def privileged(self) -> PrivilegedObservation:
        return PrivilegedObservation(self._heading_velocity(), self.state.applied_force.copy())

    def goal_features(self) -> Tuple[np.ndarray, np.ndarray]:
        """(lower goal (E, 6), upper goal (E, n_u)); heights normalized by the default height."""
        st = self.state
        lower = np.concatenate(
            [
                st.cmd_lin_vel,
                st.cmd_yaw_rate[:, None],
                st.stance[:, None].astype(float),
                (st.cmd_height / self.default_height)[:, None],
                st.cmd_waist_yaw[:, None],
            ],
            axis=-1,
        )
        return lower, self.upper_reference() - self.model.upper_default_positions

    def upper_reference(self) -> np.ndarray:
        st = self.state
        return minimum_jerk(st.wp_start, st.wp_end, st.wp_elapsed / st.wp_duration)

    def upper_reference_velocity(self) -> np.ndarray:
        st = self.state
        return minimum_jerk_velocity(st.wp_start, st.wp_end, st.wp_duration, st.wp_elapsed / st.wp_duration)

    def ee_jacobians(self) -> np.ndarray:
        """Force-transmission Jacobians (E, arms, 3, m) at the EE CoM of the current pose."""
        out = []
        for s, arm in enumerate(self.model.arms):
            kin = chain_kinematics(arm, self.state.q[:, self.arm_slices[s]])
            out.append(jacobian_at(kin, kin.ee_com))
        return np.stack(out, axis=1)

    def pop_completed_episodes(self) -> List[Dict[str, float]]:
        done, self._completed = self._completed, []
        return done

    @property
    def observation(self) -> Observation:
        return self._obs.copy()

    # --- internals ---

    def _heading_velocity(self) -> np.ndarray:
        st = self.state
        c, s = np.cos(st.yaw), np.sin(st.yaw)
        vx, vy = st.base_lin_vel[:, 0], st.base_lin_vel[:, 1]
        return np.stack([c * vx + s * vy, -s * vx + c * vy, st.base_lin_vel[:, 2]], axis=-1)

    def _measurement(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        st = self.state
        lower_pos = np.stack(
            [st.tilt[:, 0], st.tilt[:, 1], st.base_pos[:, 2] - self.default_height, wrap_angle(st.yaw - st.heading_ref)], axis=-1
        )
        v = self._heading_velocity()
        lower_vel = np.stack([v[:, 0], v[:, 1], v[:, 2], st.yaw_rate], axis=-1)
        ang_vel = np.stack([st.tilt_rate[:, 0], st.tilt_rate[:, 1], st.yaw_rate], axis=-1)
        return (
            np.concatenate([lower_pos, st.q], axis=-1),
            np.concatenate([lower_vel, st.qd], axis=-1),
            ang_vel,
            projected_gravity(st.tilt),
        )

    def _push_history(self, action: np.ndarray, mask: np.ndarray) -> None:
        pos, vel, ang, grav = self._measurement()
        for hist, new in (
            (self._obs.joint_pos_hist, pos),
            (self._obs.joint_vel_hist, vel),
            (self._obs.root_ang_vel_hist, ang),
            (self._obs.projected_gravity_hist, grav),
            (self._obs.prev_action_hist, action),
        ):
            hist[mask, :-1] = hist[mask, 1:]
            hist[mask, -1] = new[mask]

    def _fill_history(self, idx: np.ndarray) -> None:
        pos, vel, ang, grav = self._measurement()
        H = self.cfg.history_length
        if self._obs is None:
            E = self.num_envs
            self._obs = Observation(
                np.zeros((E, H, self.n)), np.zeros((E, H, self.n)), np.zeros((E, H, 3)), np.zeros((E, H, 3)), np.zeros((E, H, self.n))
            )
        self._obs.joint_pos_hist[idx] = pos[idx, None]
        self._obs.joint_vel_hist[idx] = vel[idx, None]
        self._obs.root_ang_vel_hist[idx] = ang[idx, None]
        self._obs.projected_gravity_hist[idx] = grav[idx, None]
        self._obs.prev_action_hist[idx] = 0.0

    def _reset_indices(self, idx: np.ndarray) -> None:
        st, cfg = self.state, self.cfg
        lo, hi = self.model.upper_lower_limits, self.model.upper_upper_limits
        q0 = self.model.upper_default_positions
        for e in idx:
            rng = self.rngs[e]
            st.base_pos[e] = (0.0, 0.0, self.default_height)
            st.yaw[e] = st.yaw_rate[e] = 0.0
            st.base_lin_vel[e] = 0.0
            st.tilt[e] = st.tilt_rate[e] = 0.0
            st.rest_height[e] = self.default_height
            st.q[e] = np.clip(q0 + rng.uniform(-cfg.reset_noise, cfg.reset_noise, size=self.n_upper), lo, hi)
            st.qd[e] = 0.0
            st.upper_torque[e] = 0.0

            draw = randomize(rng, self.model, cfg.randomization, cfg.sim_dt)
            st.friction[e] = draw.friction
            st.link_mass_scale[e] = draw.link_mass_scale
            st.base_mass[e] = self.model.base.mass + draw.base_mass_delta
            st.kp_scale[e] = draw.kp_scale
            st.kd_scale[e] = draw.kd_scale
            st.delay_steps[e] = min(draw.delay_steps, self._max_delay)
            st.push_interval[e] = draw.push_interval_s
            st.push_velocity[e] = draw.push_velocity
            st.push_timer[e] = draw.push_interval_s

            st.heading_ref[e] = 0.0
            self._set_lower_goal(e, sample_lower_goal(rng, cfg, self.default_height))
            st.wp_start[e] = st.q[e]
            st.wp_end[e] = sample_waypoint(rng, self.model, cfg)
            st.wp_duration[e] = rng.uniform(*cfg.waypoint_interval_s)
            st.wp_elapsed[e] = 0.0

            st.force_timer[e] = 0.0
            st.filtered_force[e] = 0.0
            if self.force_override is None:
                st.applied_force[e] = 0.0
            st.feasibility_scale[e] = 1.0
            st.action_buffer[e] = 0.0
            st.prev_action[e] = 0.0
            st.episode_step[e] = 0
        st.support_force[idx] = self._nominal_mass * -self.gravity[2]
        self._episode.clear(idx)
        self._fill_history(idx)

    def _set_lower_goal(self, e: int, goal: GoalCommandLower) -> None:
        st = self.state
        st.cmd_lin_vel[e] = goal.lin_vel_xy
        st.cmd_yaw_rate[e] = goal.ang_vel_yaw
        st.stance[e] = goal.stance_flag
        st.cmd_height[e] = goal.root_height
        st.cmd_waist_yaw[e] = goal.waist_yaw
        st.stance_anchor[e] = st.base_pos[e, :2]
        st.lower_timer[e] = self.rngs[e].uniform(*self.cfg.lower_resample_s)

    def _advance_goals(self) -> None:
        st, cfg = self.state, self.cfg
        dt = cfg.policy_dt
        st.lower_timer -= dt
        for e in np.nonzero(st.lower_timer <= 0.0)[0]:
            self._set_lower_goal(e, sample_lower_goal(self.rngs[e], cfg, self.default_height))
        st.heading_ref = wrap_angle(st.heading_ref + st.cmd_yaw_rate * dt)

        st.wp_elapsed += dt
        for e in np.nonzero(st.wp_elapsed >= st.wp_duration)[0]:
            rng = self.rngs[e]
            st.wp_start[e] = st.wp_end[e]
            st.wp_end[e] = sample_waypoint(rng, self.model, cfg)
            st.wp_elapsed[e] -= st.wp_duration[e]
            st.wp_duration[e] = rng.uniform(*cfg.waypoint_interval_s)

        st.push_timer -= dt
        for e in np.nonzero(st.push_timer <= 0.0)[0]:
            phi = self.rngs[e].uniform(0.0, 2 * np.pi)
            st.base_lin_vel[e, :2] += st.push_velocity[e] * np.array([np.cos(phi), np.sin(phi)])
            st.push_timer[e] += st.push_interval[e]

    def _arm_gravity_moment(self, q: np.ndarray, mass_scale: np.ndarray) -> np.ndarray:
        moment = np.zeros(q.shape[:-1] + (3,))
        for s, arm in enumerate(self.model.arms):
            sl = self.arm_slices[s]
            kin = chain_kinematics(arm, q[..., sl])
            weights = (arm.masses * mass_scale[..., sl])[..., None] * self.gravity
            moment += np.cross(kin.link_coms, weights).sum(axis=-2)
        return moment

    def _substep(self, action: np.ndarray, feedforward: np.ndarray) -> None:
        st, cfg = self.state, self.cfg
        dt = cfg.sim_dt
        a_lower, a_upper = action[:, :LOWER_DOF], action[:, LOWER_DOF:]

        q_target = self.model.upper_default_positions + cfg.upper_action_scale * a_upper
        kp = self._kp * st.kp_scale[:, LOWER_DOF:]
        kd = self._kd * st.kd_scale[:, LOWER_DOF:]
        tau_motor = np.clip(kp * (q_target - st.q) - kd * st.qd + feedforward, -self.model.upper_torque_limits, self.model.upper_torque_limits)

        tau_g = np.zeros_like(st.q)
        tau_ext = np.zeros_like(st.q)
        moment = np.zeros((self.num_envs, 3))
        for s, arm in enumerate(self.model.arms):
            sl = self.arm_slices[s]
            kin = chain_kinematics(arm, st.q[:, sl])
            masses = arm.masses * st.link_mass_scale[:, sl]
            tau_g[:, sl] = gravity_torque_from(kin, masses, self.gravity)
            force = st.applied_force[:, s]
            point = application_point(kin, st.application_u[:, s])
            tau_ext[:, sl] = np.einsum("...ij,...i->...j", jacobian_at(kin, point), force)
            moment += np.cross(point, force) + np.cross(kin.link_coms, masses[..., None] * self.gravity).sum(axis=-2)

        st.q, st.qd = integrate_arm(
            st.q, st.qd, tau_motor, tau_g, tau_ext, self._inertia, self._joint_friction,
            self.model.upper_lower_limits, self.model.upper_upper_limits, cfg.base_dynamics.joint_stop_stiffness, dt,
        )
        st.upper_torque = tau_motor
        self._integrate_base(a_lower, st.applied_force.sum(axis=1), moment - self._trim_moment, dt)

    def _integrate_base(self, a_lower: np.ndarray, ext_force: np.ndarray, ext_moment: np.ndarray, dt: float) -> None:
        st, cfg = self.state, self.cfg
        bd = cfg.base_dynamics
        g = -self.gravity[2]
        scale = np.asarray(cfg.lower_action_scale)
        target = a_lower * scale
        kp, kd = st.kp_scale[:, :LOWER_DOF], st.kd_scale[:, :LOWER_DOF]
        h0 = self.default_height

        st.rest_height = np.clip(st.rest_height + target[:, 2] * dt, 0.4 * h0, 1.2 * h0)
        z, vz = st.base_pos[:, 2], st.base_lin_vel[:, 2]
        support = self._nominal_mass * g + bd.leg_stiffness * kp[:, 2] * (st.rest_height - z) - bd.leg_damping * kd[:, 2] * vz
        support = np.maximum(support, 0.0)
        st.support_force = support

        v_heading = self._heading_velocity()
        drive = self._nominal_mass * bd.lin_vel_gain * kp[:, :2] * (target[:, :2] - v_heading[:, :2])
        limit = st.friction * support
        norm = np.linalg.norm(drive, axis=-1)
        drive = drive * np.where(norm > limit, limit / np.maximum(norm, 1e-12), 1.0)[:, None]

        planar = drive + ext_force[:, :2]
        c, s = np.cos(st.yaw), np.sin(st.yaw)
        total_mass = st.base_mass + np.sum(
            np.concatenate([a.masses for a in self.model.arms]) * st.link_mass_scale, axis=-1
        )
        accel = np.stack(
            [(c * planar[:, 0] - s * planar[:, 1]) / total_mass,
             (s * planar[:, 0] + c * planar[:, 1]) / total_mass,
             (support + ext_force[:, 2]) / total_mass - g],
            axis=-1,
        )
        st.base_lin_vel = st.base_lin_vel + accel * dt
        st.base_pos = st.base_pos + st.base_lin_vel * dt
        grounded = st.base_pos[:, 2] < 0.0
        st.base_pos[grounded, 2] = 0.0
        st.base_lin_vel[grounded, 2] = np.maximum(st.base_lin_vel[grounded, 2], 0.0)

        yaw_torque = np.clip(
            bd.yaw_inertia * bd.yaw_rate_gain * kp[:, 3] * (target[:, 3] - st.yaw_rate), -bd.max_yaw_torque, bd.max_yaw_torque
        ) + ext_moment[:, 2]
        st.yaw_rate = st.yaw_rate + yaw_torque / bd.yaw_inertia * dt
        st.yaw = wrap_angle(st.yaw + st.yaw_rate * dt)

        tilt_accel = (ext_moment[:, :2] - bd.tilt_stiffness * st.tilt - bd.tilt_damping * st.tilt_rate) / bd.tilt_inertia
        st.tilt_rate = st.tilt_rate + tilt_accel * dt
        st.tilt = st.tilt + st.tilt_rate * dt

    def _reward_inputs(self, action: np.ndarray) -> RewardInputs:
        st = self.state
        c, s = np.cos(st.yaw), np.sin(st.yaw)
        drift = st.base_pos[:, :2] - st.stance_anchor
        drift_heading = np.stack([c * drift[:, 0] + s * drift[:, 1], -s * drift[:, 0] + c * drift[:, 1]], axis=-1)
        lo, hi = self.model.upper_lower_limits, self.model.upper_upper_limits
        violation = np.sum(np.maximum(st.q - hi, 0.0) + np.maximum(lo - st.q, 0.0), axis=-1)
        return RewardInputs(
            base_lin_vel=self._heading_velocity(),
            yaw_rate=st.yaw_rate.copy(),
            base_height=st.base_pos[:, 2].copy(),
            tilt=st.tilt.copy(),
            heading_offset=wrap_angle(st.yaw - st.heading_ref),
            support_force=st.support_force.copy(),
            stance_drift=drift_heading,
            cmd_lin_vel=st.cmd_lin_vel.copy(),
            cmd_yaw_rate=st.cmd_yaw_rate.copy(),
            cmd_height=st.cmd_height.copy(),
            cmd_waist_yaw=st.cmd_waist_yaw.copy(),
            stance=st.stance.copy(),
            q_upper=st.q.copy(),
            q_upper_ref=self.upper_reference(),
            upper_torque=st.upper_torque.copy(),
            joint_limit_violation=violation,
            action=action,
            prev_action=st.prev_action.copy(),
        )

    def _accumulate(self, inp: RewardInputs, r_lower: np.ndarray, r_upper: np.ndarray) -> None:
        upper = np.mean(np.abs(inp.q_upper - inp.q_upper_ref), axis=-1)
        lin = np.mean(np.abs(inp.base_lin_vel[:, :2] - inp.cmd_lin_vel), axis=-1)
        ang = np.abs(inp.yaw_rate - inp.cmd_yaw_rate)
        self.last_step_errors = {"upper": upper, "root_lin": lin, "root_ang": ang}
        acc = self._episode
        acc.upper_error += upper
        acc.lin_error += lin
        acc.ang_error += ang
        acc.feasibility += np.mean(self.state.feasibility_scale, axis=-1)
        acc.reward_lower += r_lower
        acc.reward_upper += r_upper

    def _finish_episodes(self, idx: np.ndarray, fell: np.ndarray) -> None:
        acc = self._episode
        for e in idx:
            T = max(int(self.state.episode_step[e]), 1)
            lin, ang = acc.lin_error[e] / T, acc.ang_error[e] / T
            self._completed.append({
                "instance": int(e),
                "length": T,
                "fell": bool(fell[e]),
                "e_upper": float(acc.upper_error[e] / T),
                "e_root": float((2.0 * lin + ang) / 3.0),
                "e_root_lin": float(lin),
                "e_root_ang": float(ang),
                "feasibility": float(acc.feasibility[e] / T),
                "reward_lower": float(acc.reward_lower[e]),
                "reward_upper": float(acc.reward_upper[e]),
            })
        if self.recorder is not None and self.recorder.env_index in idx:
            self.recorder.end_episode()

    def _record(self, action: np.ndarray, terms: Dict[str, np.ndarray], done: bool) -> None:
        st, e = self.state, self.recorder.env_index
        row: Dict[str, float] = {"step": int(st.episode_step[e]), "done": int(done)}
        for i, name in enumerate(("x", "y", "z")):
            row[f"base_{name}"] = float(st.base_pos[e, i])
        row.update(yaw=float(st.yaw[e]), roll=float(st.tilt[e, 0]), pitch=float(st.tilt[e, 1]))
        ref = self.upper_reference()[e]
        names = [n for arm in self.model.arms for n in arm.joint_names]
        for i, name in enumerate(names):
            row[f"q_{name}"] = float(st.q[e, i])
            row[f"qref_{name}"] = float(ref[i])
        for i, value in enumerate(action[e]):
            row[f"a_{i}"] = float(value)
        for s, side in enumerate(self.model.sides):
            for i, axis in enumerate("xyz"):
                row[f"f_{side}_{axis}"] = float(st.applied_force[e, s, i])
        for name, value in terms.items():
            row[f"r_{name}"] = float(value[e])
        self.recorder.record(row)
