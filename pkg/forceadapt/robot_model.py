# forceadapt/robot_model.py
"""
Articulated robot description: a (possibly floating) base abstraction plus
one or two serial arms. Model files are TOML with a `[base]` table and
repeated `[[arm]]`, `[[joint]]` and `[[link]]` tables; SI units, radians.
"""
import logging
import math
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import toml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ModelFormatError, ModelValidationError

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]
Side = Literal["left", "right"]

MODELS_DIR = Path(__file__).resolve().parent / "models"


class _Spec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# --- Domain Types ---

class JointSpec(_Spec):
    name: str
    parent: str
    axis: Vec3
    origin_translation: Vec3 = (0.0, 0.0, 0.0)
    origin_rotation: Vec3 = (0.0, 0.0, 0.0)
    position_limits: Tuple[float, float]
    torque_limit: float = Field(ge=0)
    default_position: float = 0.0
    pd_gains: Tuple[float, float]
    effective_inertia: float = Field(gt=0)
    viscous_friction: float = Field(0.0, ge=0)

    @field_validator("axis")
    @classmethod
    def _unit_axis(cls, v: Vec3) -> Vec3:
        if abs(math.sqrt(sum(c * c for c in v)) - 1.0) > 1e-9:
            raise ValueError("axis must have unit norm")
        return v

    @model_validator(mode="after")
    def _limits(self) -> "JointSpec":
        lo, hi = self.position_limits
        if not lo < hi:
            raise ValueError("position_limits: lower must be < upper")
        if not lo <= self.default_position <= hi:
            raise ValueError("default_position must lie within position_limits")
        return self


class LinkSpec(_Spec):
    name: str
    joint: str  # joint driving this link
    mass: float = Field(ge=0)
    com_offset: Vec3 = (0.0, 0.0, 0.0)


class BaseSpec(_Spec):
    name: str
    mass: float = Field(ge=0)
    inertia: Vec3 = (0.0, 0.0, 0.0)
    default_height: float = Field(0.0, ge=0)
    floating: bool = False
    lower_dof_count: int = Field(0, ge=0)


class ArmSpec(_Spec):
    side: Side
    mount: Vec3
    root_joint: str
    ee_link: str
    distal_offset: Vec3
    joints: List[JointSpec]
    links: List[LinkSpec]

    @model_validator(mode="after")
    def _distal_beyond_com(self) -> "ArmSpec":
        d = np.asarray(self.distal_offset)
        norm = np.linalg.norm(d)
        if norm > 0 and float(np.dot(np.asarray(self.links[-1].com_offset), d / norm)) > norm + 1e-12:
            raise ValueError("distal_offset must lie beyond or at the EE link CoM")
        return self

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def joint_names(self) -> List[str]:
        return [j.name for j in self.joints]

    @property
    def torque_limits(self) -> np.ndarray:
        return np.array([j.torque_limit for j in self.joints])

    @property
    def lower_limits(self) -> np.ndarray:
        return np.array([j.position_limits[0] for j in self.joints])

    @property
    def upper_limits(self) -> np.ndarray:
        return np.array([j.position_limits[1] for j in self.joints])

    @property
    def default_positions(self) -> np.ndarray:
        return np.array([j.default_position for j in self.joints])

    @property
    def kp(self) -> np.ndarray:
        return np.array([j.pd_gains[0] for j in self.joints])

    @property
    def kd(self) -> np.ndarray:
        return np.array([j.pd_gains[1] for j in self.joints])

    @property
    def inertias(self) -> np.ndarray:
        return np.array([j.effective_inertia for j in self.joints])

    @property
    def frictions(self) -> np.ndarray:
        return np.array([j.viscous_friction for j in self.joints])

    @property
    def masses(self) -> np.ndarray:
        return np.array([link.mass for link in self.links])


class RobotModel(_Spec):
    base: BaseSpec
    arms: List[ArmSpec]

    @model_validator(mode="after")
    def _structure(self) -> "RobotModel":
        if not 1 <= len(self.arms) <= 2:
            raise ValueError("a model has one or two arms")
        sides = [a.side for a in self.arms]
        if len(set(sides)) != len(sides):
            raise ValueError("arm sides must be distinct")
        if len(self.arms) == 2 and self.arms[0].dof != self.arms[1].dof:
            raise ValueError("both arms must have n^u/2 joints")
        names = [n for a in self.arms for n in a.joint_names]
        if len(set(names)) != len(names):
            raise ValueError("joint names must be unique")
        return self

    @property
    def name(self) -> str:
        return self.base.name

    @property
    def lower_dof_count(self) -> int:
        return self.base.lower_dof_count

    @property
    def upper_dof_count(self) -> int:
        return sum(a.dof for a in self.arms)

    @property
    def dof(self) -> int:
        return self.lower_dof_count + self.upper_dof_count

    @property
    def sides(self) -> List[Side]:
        return [a.side for a in self.arms]

    def arm(self, side: Side) -> ArmSpec:
        for a in self.arms:
            if a.side == side:
                return a
        raise KeyError(f"model '{self.name}' has no {side} arm")

    def _concat(self, attr: str) -> np.ndarray:
        return np.concatenate([getattr(a, attr) for a in self.arms])

    @property
    def upper_torque_limits(self) -> np.ndarray:
        return self._concat("torque_limits")

    @property
    def upper_default_positions(self) -> np.ndarray:
        return self._concat("default_positions")

    @property
    def upper_lower_limits(self) -> np.ndarray:
        return self._concat("lower_limits")

    @property
    def upper_upper_limits(self) -> np.ndarray:
        return self._concat("upper_limits")


# --- File format ---

def _build(model_cls, data: Dict[str, Any], what: str):
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        field = ".".join(str(p) for p in err["loc"]) or None
        where = f"{what}, field '{field}'" if field else what
        raise ModelValidationError(f"{where}: {err['msg']}", field=field) from e


def _assemble(data: Dict[str, Any]) -> RobotModel:
    unknown = set(data) - {"base", "arm", "joint", "link"}
    if unknown:
        raise ModelValidationError(f"unknown section(s): {', '.join(sorted(unknown))}", field=sorted(unknown)[0])
    if "base" not in data:
        raise ModelFormatError("missing [base] section")

    base = _build(BaseSpec, data["base"], "[base]")
    joints = [_build(JointSpec, j, f"joint '{j.get('name', i)}'") for i, j in enumerate(data.get("joint", []))]
    links = [_build(LinkSpec, l, f"link '{l.get('name', i)}'") for i, l in enumerate(data.get("link", []))]

    seen = set()
    for j in joints:
        if j.name in seen:
            raise ModelValidationError(f"joint '{j.name}': duplicated joint name", field=j.name)
        seen.add(j.name)
    joint_by_name = {j.name: j for j in joints}
    link_by_joint = {}
    for link in links:
        if link.joint not in joint_by_name:
            raise ModelValidationError(f"link '{link.name}': unknown driving joint '{link.joint}'", field=link.name)
        link_by_joint[link.joint] = link
    children: Dict[str, List[JointSpec]] = {}
    for j in joints:
        children.setdefault(j.parent, []).append(j)

    arms = []
    used = set()
    for raw in data.get("arm", []):
        raw = dict(raw)
        root = raw.get("root_joint")
        if root not in joint_by_name:
            raise ModelValidationError(f"arm '{raw.get('side')}': unknown root_joint '{root}'", field="root_joint")
        chain_joints, chain_links = [], []
        joint = joint_by_name[root]
        while True:
            if joint.name in used:
                raise ModelValidationError(f"joint '{joint.name}': appears in a cycle or in two arms", field=joint.name)
            used.add(joint.name)
            if joint.name not in link_by_joint:
                raise ModelValidationError(f"joint '{joint.name}': has no driven link", field=joint.name)
            link = link_by_joint[joint.name]
            chain_joints.append(joint)
            chain_links.append(link)
            if link.name == raw.get("ee_link"):
                break
            nxt = children.get(link.name, [])
            if len(nxt) != 1:
                raise ModelValidationError(
                    f"link '{link.name}': arm chains must be serial and reach ee_link '{raw.get('ee_link')}'",
                    field=link.name,
                )
            joint = nxt[0]
        raw["joints"] = chain_joints
        raw["links"] = chain_links
        arms.append(_build(ArmSpec, raw, f"arm '{raw.get('side')}'"))

    orphans = [j.name for j in joints if j.name not in used]
    if orphans:
        raise ModelValidationError(f"joint '{orphans[0]}': not reachable from any arm root", field=orphans[0])
    for a in arms:
        if a.joints[0].parent != "base":
            raise ModelValidationError(f"joint '{a.root_joint}': arm roots must have parent 'base'", field=a.root_joint)

    return _build(RobotModel, {"base": base, "arms": arms}, f"model '{base.name}'")


def parse_model(text: str, source: str = "<string>") -> RobotModel:
    try:
        data = toml.loads(text)
    except toml.TomlDecodeError as e:
        raise ModelFormatError(f"{source}: malformed model file: {e}") from e
    return _assemble(data)


def load_model(path: Path) -> RobotModel:
    """Loads and validates a model file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ModelFormatError(f"cannot read model file {path}: {e}") from e
    model = parse_model(text, source=str(path))
    logger.info("loaded model %s (n=%d, n_l=%d, n_u=%d)", model.name, model.dof, model.lower_dof_count, model.upper_dof_count)
    return model


def serialize_model(model: RobotModel) -> str:
    arms, joints, links = [], [], []
    for a in model.arms:
        arms.append(a.model_dump(mode="json", exclude={"joints", "links"}))
        joints.extend(j.model_dump(mode="json") for j in a.joints)
        links.extend(l.model_dump(mode="json") for l in a.links)
    return toml.dumps({"base": model.base.model_dump(mode="json"), "arm": arms, "joint": joints, "link": links})


# --- Builtin models ---

def _model_dirs() -> List[Path]:
    from .config import get_settings

    dirs = [MODELS_DIR]
    extra = get_settings().models_dir
    if extra is not None and Path(extra).is_dir():
        dirs.append(Path(extra).resolve())
    return dirs


@lru_cache(maxsize=None)
def _load_dir(directory: Path) -> Tuple[RobotModel, ...]:
    return tuple(load_model(p) for p in sorted(directory.glob("*.toml")))


def builtin_models() -> List[RobotModel]:
    """Models shipped in models/ plus FORCEADAPT_MODELS_DIR; each directory is parsed once per process."""
    return [m for d in _model_dirs() for m in _load_dir(d)]


def builtin_model(name: str) -> Optional[RobotModel]:
    """Returns the builtin model called `name`, or None."""
    for model in builtin_models():
        if model.name == name:
            return model
    return None


def resolve_model(name_or_path: str) -> RobotModel:
    """Builtin model name or path to a model file."""
    model = builtin_model(name_or_path)
    if model is not None:
        return model
    path = Path(name_or_path)
    if path.is_file():
        return load_model(path)
    raise ModelFormatError(f"unknown model '{name_or_path}' (not a builtin name or a file)")
