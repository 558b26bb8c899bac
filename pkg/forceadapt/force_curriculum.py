# forceadapt/force_curriculum.py
"""
Torque-limit-aware end-effector force sampling and the progressive force
curriculum.

Envelope, projection and filter routines broadcast over leading batch
dimensions: Jacobians are (..., 3, m), torque vectors (..., m), forces (..., 3).
"""
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Deque, Dict, Optional, Tuple

import numpy as np

from .config import CurriculumConfig
from .errors import InfeasibleGravityError
from .kinematics import ArmPose, ChainKinematics, forward_kinematics
from .robot_model import RobotModel

logger = logging.getLogger(__name__)

# Force clipping boxes (N), per axis x, y, z.
NARROW_CLIP = (np.array([-50.0, -50.0, -60.0]), np.array([50.0, 50.0, 5.0]))
WIDE_CLIP = (np.array([-100.0, -100.0, -100.0]), np.array([100.0, 100.0, 5.0]))
CLIP_PRESETS: Dict[str, Tuple[np.ndarray, np.ndarray]] = {"narrow": NARROW_CLIP, "wide": WIDE_CLIP}


# --- Domain Types ---

@dataclass(frozen=True)
class ForceEnvelope:
    f_min: np.ndarray
    f_max: np.ndarray
    clip_min: np.ndarray
    clip_max: np.ndarray

    def clipped(self, clip_min: np.ndarray, clip_max: np.ndarray) -> "ForceEnvelope":
        clip_min, clip_max = np.asarray(clip_min, dtype=float), np.asarray(clip_max, dtype=float)
        f_min = np.minimum(np.maximum(self.f_min, clip_min), clip_max)
        f_max = np.maximum(np.minimum(self.f_max, clip_max), f_min)
        return ForceEnvelope(f_min, f_max, np.broadcast_to(clip_min, f_min.shape), np.broadcast_to(clip_max, f_max.shape))


@dataclass
class CurriculumState:
    alpha_g: float = 0.0
    success_window: Deque[float] = field(default_factory=lambda: deque(maxlen=50))
    step_size: float = 0.05
    filter_state: np.ndarray = field(default_factory=lambda: np.zeros((2, 3)))
    promote_threshold: float = 0.25
    demote_threshold: float = 0.5
    min_window_fill: int = 1

    @classmethod
    def from_config(cls, cfg: CurriculumConfig) -> "CurriculumState":
        return cls(
            alpha_g=cfg.alpha_init,
            success_window=deque(maxlen=cfg.window),
            step_size=cfg.step_size,
            promote_threshold=cfg.promote_threshold,
            demote_threshold=cfg.demote_threshold,
            min_window_fill=cfg.min_window_fill,
        )


@dataclass(frozen=True)
class ForceSample:
    raw_force: np.ndarray
    filtered_force: np.ndarray
    applied_force: np.ndarray
    ratios: np.ndarray
    application_point: np.ndarray
    feasibility_scale: float


# --- Torque-aware bounds ---

def gravity_feasible(tau_limit: np.ndarray, tau_gravity: np.ndarray) -> np.ndarray:
    """True where -tau_lim <= tau_g <= tau_lim holds for every joint."""
    return np.all(np.abs(tau_gravity) <= tau_limit, axis=-1)


def envelope_bounds(jacobian: np.ndarray, tau_limit: np.ndarray, tau_gravity: np.ndarray, epsilon: float = 1e-6):
    """Element-wise per-axis bounds, no feasibility check. Returns (f_min, f_max)."""
    denom = np.abs(jacobian) + epsilon  # (..., 3, m)
    upper = (np.asarray(tau_limit) - tau_gravity)[..., None, :]
    lower = (-np.asarray(tau_limit) - tau_gravity)[..., None, :]
    return np.max(lower / denom, axis=-1), np.min(upper / denom, axis=-1)


def admissible_bounds(
    jacobian: np.ndarray, tau_limit: np.ndarray, tau_gravity: np.ndarray, epsilon: float = 1e-6
) -> ForceEnvelope:
    tau_limit = np.asarray(tau_limit, dtype=float)
    if np.any(tau_limit < 0):
        raise ValueError("tau_limit must be non-negative")
    if not np.all(gravity_feasible(tau_limit, tau_gravity)):
        raise InfeasibleGravityError("gravity torque exceeds the joint torque limits at this pose")
    f_min, f_max = envelope_bounds(jacobian, tau_limit, tau_gravity, epsilon)
    inf = np.full(f_min.shape, np.inf)
    return ForceEnvelope(f_min, f_max, -inf, inf)


def naive_envelope(clip_min: np.ndarray, clip_max: np.ndarray) -> ForceEnvelope:
    """The clip box itself, ignoring torque limits (ablation baseline)."""
    clip_min, clip_max = np.asarray(clip_min, dtype=float), np.asarray(clip_max, dtype=float)
    return ForceEnvelope(clip_min.copy(), clip_max.copy(), clip_min.copy(), clip_max.copy())


# --- Sampling ---

def sample_ratios(rng: np.random.Generator, concentration=(1.0, 1.0, 1.0)) -> np.ndarray:
    concentration = np.asarray(concentration, dtype=float)
    if np.any(concentration <= 0):
        raise ValueError("Dirichlet concentration must be strictly positive")
    return rng.dirichlet(concentration)


def sample_force(rng: np.random.Generator, envelope: ForceEnvelope, ratios: np.ndarray) -> np.ndarray:
    return rng.uniform(ratios * envelope.f_min, ratios * envelope.f_max)


def force_from_quantiles(envelope: ForceEnvelope, ratios: np.ndarray, quantiles: np.ndarray) -> np.ndarray:
    """Deterministic form of sample_force: quantiles in [0, 1] per axis."""
    low, high = ratios * envelope.f_min, ratios * envelope.f_max
    return low + quantiles * (high - low)


def project_feasible(
    jacobian: np.ndarray, tau_limit: np.ndarray, tau_gravity: np.ndarray, force: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Largest s in [0, 1] with -tau_lim <= tau_g + s J^T F <= tau_lim. Returns (s F, s)."""
    c = np.einsum("...ij,...i->...j", jacobian, force)
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(
            c > 0,
            (tau_limit - tau_gravity) / c,
            np.where(c < 0, (-tau_limit - tau_gravity) / c, np.inf),
        )
    s = np.clip(np.min(bound, axis=-1), 0.0, 1.0)
    # keep the scaled torque strictly inside the box under rounding
    s = np.where(s < 1.0, s * (1.0 - 1e-12), s)
    return force * s[..., None], s


def sample_feasible_force(
    rng: np.random.Generator,
    jacobian: np.ndarray,
    tau_limit: np.ndarray,
    tau_gravity: np.ndarray,
    clip: Tuple[np.ndarray, np.ndarray] = NARROW_CLIP,
    concentration=(1.0, 1.0, 1.0),
    epsilon: float = 1e-6,
    alpha_g: float = 1.0,
    application_point: Optional[np.ndarray] = None,
    curriculum: Optional[CurriculumState] = None,
    ee_index: int = 0,
    beta: float = 0.9,
) -> ForceSample:
    """bounds -> ratios -> uniform sample -> low-pass -> alpha_g -> projection, for one EE.

    The filter state lives in `curriculum.filter_state[ee_index]` and is advanced in place.
    Without a curriculum state the filter is the identity, so the applied force is
    always alpha_g * feasibility_scale * filtered_force.
    """
    envelope = admissible_bounds(jacobian, tau_limit, tau_gravity, epsilon).clipped(*clip)
    ratios = sample_ratios(rng, concentration)
    raw = sample_force(rng, envelope, ratios)
    filtered = raw.copy() if curriculum is None else filter_force(curriculum, ee_index, raw, beta)
    applied, s = project_feasible(jacobian, tau_limit, tau_gravity, alpha_g * filtered)
    point = np.zeros(3) if application_point is None else application_point
    return ForceSample(raw, filtered, applied, ratios, point, float(s))


# --- Progressive curriculum ---

def update_alpha(state: CurriculumState, episode_error: float) -> CurriculumState:
    """Success-gated alpha_g schedule; the window restarts after every change."""
    window = deque(state.success_window, maxlen=state.success_window.maxlen)
    window.append(float(episode_error))
    alpha = state.alpha_g
    if len(window) >= state.min_window_fill:
        mean_error = float(np.mean(window))
        if mean_error < state.promote_threshold and alpha < 1.0:
            alpha = min(1.0, alpha + state.step_size)
            logger.info("force curriculum promoted: alpha_g=%.3f (window error %.3f)", alpha, mean_error)
            window.clear()
        elif mean_error > state.demote_threshold and alpha > 0.0:
            alpha = max(0.0, alpha - state.step_size)
            logger.info("force curriculum demoted: alpha_g=%.3f (window error %.3f)", alpha, mean_error)
            window.clear()
    return replace(state, alpha_g=float(np.clip(alpha, 0.0, 1.0)), success_window=window)


def low_pass(previous: np.ndarray, target: np.ndarray, beta: float) -> np.ndarray:
    return beta * previous + (1.0 - beta) * target


def filter_force(state: CurriculumState, ee_index: int, target: np.ndarray, beta: float = 0.9) -> np.ndarray:
    out = low_pass(state.filter_state[ee_index], np.asarray(target, dtype=float), beta)
    state.filter_state[ee_index] = out
    return out


def walking_projection(force: np.ndarray, commanded_planar_velocity: np.ndarray, deadband: float = 0.05) -> np.ndarray:
    """Re-aims the planar force opposite the commanded velocity, keeping its magnitude."""
    force = np.asarray(force, dtype=float)
    v = np.asarray(commanded_planar_velocity, dtype=float)
    speed = np.linalg.norm(v, axis=-1, keepdims=True)
    moving = speed > deadband
    direction = v / np.where(speed > 0, speed, 1.0)
    planar = -direction * np.linalg.norm(force[..., :2], axis=-1, keepdims=True)
    out = force.copy()
    out[..., :2] = np.where(moving, planar, force[..., :2])
    return out


# --- Application point ---

def application_point(kin: ChainKinematics, u) -> np.ndarray:
    """Point at fraction u from the last joint origin to the EE distal point."""
    u = np.asarray(u, dtype=float)[..., None]
    return kin.wrist_origin + u * (kin.distal_point - kin.wrist_origin)


def sample_application_point(rng: np.random.Generator, model: RobotModel, pose: ArmPose, base=None) -> np.ndarray:
    return application_point(forward_kinematics(model, pose, base), rng.uniform(0.0, 1.0))
