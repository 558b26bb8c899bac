# forceadapt/kinematics.py
"""
Forward kinematics, linear point Jacobians and static gravity torques for the
serial arms of a RobotModel.

All array routines accept joint positions with arbitrary leading batch
dimensions, `q` of shape (..., m); results carry the same leading dimensions.
Joint origins use the URDF fixed-axis roll-pitch-yaw convention
(R = Rz(yaw) @ Ry(pitch) @ Rx(roll)).
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .robot_model import ArmSpec, RobotModel, Side

GRAVITY = np.array([0.0, 0.0, -9.81])


# --- Domain Types ---

@dataclass(frozen=True)
class FramePlacement:
    translation: np.ndarray
    rotation: np.ndarray

    @classmethod
    def identity(cls) -> "FramePlacement":
        return cls(np.zeros(3), np.eye(3))

    @classmethod
    def from_yaw(cls, translation: Sequence[float], yaw: float) -> "FramePlacement":
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.asarray(translation, dtype=float), np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point) + self.translation

    def compose(self, other: "FramePlacement") -> "FramePlacement":
        return FramePlacement(self.apply(other.translation), self.rotation @ other.rotation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def is_orthonormal(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass(frozen=True)
class ArmPose:
    side: Side
    joint_positions: np.ndarray

    def limit_violations(self, model: RobotModel) -> np.ndarray:
        """Per-joint flags; poses outside limits are allowed but reported."""
        arm = model.arm(self.side)
        q = np.asarray(self.joint_positions)
        return (q < arm.lower_limits) | (q > arm.upper_limits)


@dataclass(frozen=True)
class ChainKinematics:
    """World-frame quantities of one arm chain, batched over leading dims."""

    link_rotations: np.ndarray  # (..., m, 3, 3)
    joint_origins: np.ndarray  # (..., m, 3); link frame origins
    joint_axes: np.ndarray  # (..., m, 3)
    link_coms: np.ndarray  # (..., m, 3)
    distal_point: np.ndarray  # (..., 3)

    @property
    def wrist_origin(self) -> np.ndarray:
        return self.joint_origins[..., -1, :]

    @property
    def ee_com(self) -> np.ndarray:
        return self.link_coms[..., -1, :]

    @property
    def placements(self) -> List[FramePlacement]:
        if self.joint_origins.ndim != 2:
            raise ValueError("placements are only available for a single pose")
        return [FramePlacement(o, R) for o, R in zip(self.joint_origins, self.link_rotations)]


# --- Rotations ---

def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_rotation(axis: Sequence[float], angle) -> np.ndarray:
    """Rodrigues' formula; `angle` may be an array, giving (..., 3, 3)."""
    K = _skew(np.asarray(axis, dtype=float))
    angle = np.asarray(angle, dtype=float)
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def rpy_rotation(rpy: Sequence[float]) -> np.ndarray:
    r, p, y = rpy
    return axis_angle_rotation((0, 0, 1), y) @ axis_angle_rotation((0, 1, 0), p) @ axis_angle_rotation((1, 0, 0), r)


# --- Chain evaluation ---

def chain_kinematics(
    arm: ArmSpec,
    q: np.ndarray,
    base_rotation: Optional[np.ndarray] = None,
    base_translation: Optional[np.ndarray] = None,
) -> ChainKinematics:
    q = np.asarray(q, dtype=float)
    batch = q.shape[:-1]
    R = np.broadcast_to(np.eye(3) if base_rotation is None else base_rotation, batch + (3, 3))
    p = np.broadcast_to(np.zeros(3) if base_translation is None else base_translation, batch + (3,))
    p = p + np.einsum("...ij,j->...i", R, np.asarray(arm.mount, dtype=float))

    rotations, origins, axes, coms = [], [], [], []
    for idx, (joint, link) in enumerate(zip(arm.joints, arm.links)):
        p = p + np.einsum("...ij,j->...i", R, np.asarray(joint.origin_translation))
        R_joint = R @ rpy_rotation(joint.origin_rotation)
        axes.append(np.einsum("...ij,j->...i", R_joint, np.asarray(joint.axis)))
        R = R_joint @ axis_angle_rotation(joint.axis, q[..., idx])
        rotations.append(R)
        origins.append(p)
        coms.append(p + np.einsum("...ij,j->...i", R, np.asarray(link.com_offset)))

    distal = p + np.einsum("...ij,j->...i", R, np.asarray(arm.distal_offset))
    return ChainKinematics(
        link_rotations=np.stack(rotations, axis=-3),
        joint_origins=np.stack(origins, axis=-2),
        joint_axes=np.stack(axes, axis=-2),
        link_coms=np.stack(coms, axis=-2),
        distal_point=distal,
    )


def jacobian_at(kin: ChainKinematics, point: np.ndarray, upto: Optional[int] = None) -> np.ndarray:
    """Linear Jacobian (..., 3, m) of a point attached to link `upto` (default: last)."""
    cols = np.cross(kin.joint_axes, np.asarray(point)[..., None, :] - kin.joint_origins)
    if upto is not None:
        cols = cols.copy()
        cols[..., upto + 1:, :] = 0.0
    return np.swapaxes(cols, -1, -2)


def gravity_torque_from(kin: ChainKinematics, masses: np.ndarray, gravity: np.ndarray = GRAVITY) -> np.ndarray:
    """Holding torque -sum_k J_com,k^T m_k g, batched; `masses` is (..., m)."""
    weights = np.asarray(masses)[..., None] * np.asarray(gravity)  # (..., m, 3)
    # Suffix sums over links k >= j
    force_tail = np.flip(np.cumsum(np.flip(weights, -2), -2), -2)
    moment_tail = np.flip(np.cumsum(np.flip(np.cross(kin.link_coms, weights), -2), -2), -2)
    moment_about_joint = moment_tail - np.cross(kin.joint_origins, force_tail)
    return -np.einsum("...ji,...ji->...j", kin.joint_axes, moment_about_joint)


# --- Operations ---

def _placement_args(base: Optional[FramePlacement]):
    if base is None:
        return None, None
    return base.rotation, base.translation


def forward_kinematics(model: RobotModel, pose: ArmPose, base: Optional[FramePlacement] = None) -> ChainKinematics:
    arm = model.arm(pose.side)
    q = np.asarray(pose.joint_positions, dtype=float)
    if q.shape[-1] != arm.dof:
        raise ValueError(f"pose has {q.shape[-1]} joints, {pose.side} arm has {arm.dof}")
    return chain_kinematics(arm, q, *_placement_args(base))


def point_jacobian(model: RobotModel, pose: ArmPose, point: np.ndarray, base: Optional[FramePlacement] = None) -> np.ndarray:
    """3 x m linear Jacobian of a world point rigidly attached to the final link."""
    return jacobian_at(forward_kinematics(model, pose, base), point)


def ee_com_jacobian(model: RobotModel, pose: ArmPose, base: Optional[FramePlacement] = None) -> np.ndarray:
    kin = forward_kinematics(model, pose, base)
    return jacobian_at(kin, kin.ee_com)


def gravity_torque(
    model: RobotModel,
    pose: ArmPose,
    gravity: np.ndarray = GRAVITY,
    base: Optional[FramePlacement] = None,
    masses: Optional[np.ndarray] = None,
) -> np.ndarray:
    kin = forward_kinematics(model, pose, base)
    if masses is None:
        masses = model.arm(pose.side).masses
    return gravity_torque_from(kin, masses, gravity)


def clamp_to_torque_limits(model: RobotModel, torques: np.ndarray, side: Optional[Side] = None) -> np.ndarray:
    """Clamps one arm's torques (side given) or the full upper-body vector."""
    limits = model.arm(side).torque_limits if side is not None else model.upper_torque_limits
    return np.clip(torques, -limits, limits)
