# forceadapt/controllers.py
"""
Joint-space upper-body tracking baselines. Targets are already joint
positions, so no inverse kinematics is involved: the controller emits the
env action that makes the joint PD track the target, plus an optional
feed-forward torque.
"""
import logging
from typing import Literal, Optional, Tuple

import numpy as np

from .errors import ConfigError
from .robot_model import RobotModel

logger = logging.getLogger(__name__)

ControllerMode = Literal["pd", "pid", "pd_id"]


class UpperJointController:
    def __init__(
        self,
        mode: ControllerMode,
        model: RobotModel,
        action_scale: float,
        ki: float = 20.0,
        integral_limit: float = 5.0,
        estimator=None,
    ):
        if mode not in ("pd", "pid", "pd_id"):
            raise ConfigError(f"unknown upper controller mode '{mode}'", key="train.mode")
        if mode == "pd_id" and estimator is None:
            raise ConfigError("pd_id mode needs a force estimator", key="train.mode")
        self.mode = mode
        self.model = model
        self.action_scale = action_scale
        self.ki = ki
        self.integral_limit = integral_limit
        self.estimator = estimator
        self._slices = []
        offset = 0
        for arm in model.arms:
            self._slices.append(slice(offset, offset + arm.dof))
            offset += arm.dof
        self.integral: Optional[np.ndarray] = None

    def reset(self, num_envs: int) -> None:
        self.integral = np.zeros((num_envs, self.model.upper_dof_count))

    def reset_indices(self, mask: np.ndarray) -> None:
        if self.integral is not None:
            self.integral[mask] = 0.0

    def compensation(self, jacobians: np.ndarray, forces: np.ndarray) -> np.ndarray:
        """-J^T F per arm: cancels the joint torque the force F produces. jacobians (E, arms, 3, m), forces (E, arms, 3)."""
        out = np.zeros(jacobians.shape[:1] + (self.model.upper_dof_count,))
        for s, sl in enumerate(self._slices):
            out[:, sl] = -np.einsum("eij,ei->ej", jacobians[:, s], forces[:, s])
        return out

    def compute(
        self,
        targets: np.ndarray,
        q: np.ndarray,
        dt: float,
        jacobians: Optional[np.ndarray] = None,
        force_estimate: Optional[np.ndarray] = None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (upper actions, feed-forward torques), both (E, n_u)."""
        targets = np.atleast_2d(targets)
        q = np.atleast_2d(q)
        actions = (targets - self.model.upper_default_positions) / self.action_scale
        feedforward = np.zeros_like(q, dtype=float)
        if self.mode == "pid":
            if self.integral is None or self.integral.shape != q.shape:
                self.reset(q.shape[0])
            self.integral = np.clip(self.integral + self.ki * (targets - q) * dt, -self.integral_limit, self.integral_limit)
            feedforward = feedforward + self.integral
        elif self.mode == "pd_id":
            if jacobians is None or force_estimate is None:
                raise ConfigError("pd_id compensation needs EE Jacobians and a force estimate", key="train.mode")
            feedforward = feedforward + self.compensation(jacobians, force_estimate)
        return actions, feedforward
