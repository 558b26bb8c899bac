import numpy as np
import pytest

from forceadapt.errors import ModelFormatError, ModelValidationError
from forceadapt.robot_model import MODELS_DIR, builtin_models, load_model, parse_model, resolve_model, serialize_model

TOY_TEXT = (MODELS_DIR / "toy_arm.toml").read_text(encoding="utf-8")


def test_builtin_models_load(toy_arm, humanoid):
    assert {m.name for m in builtin_models()} >= {"toy-arm", "mini-humanoid"}
    assert toy_arm.dof == 2 and toy_arm.lower_dof_count == 0
    assert not toy_arm.base.floating
    assert humanoid.lower_dof_count == 4
    assert humanoid.upper_dof_count == 8
    assert humanoid.dof == 12
    assert humanoid.sides == ["left", "right"]


def test_arm_arrays_follow_chain_order(toy_arm, humanoid):
    arm = toy_arm.arm("left")
    assert arm.joint_names == ["shoulder", "elbow"]
    np.testing.assert_array_equal(arm.torque_limits, [10.0, 5.0])
    np.testing.assert_array_equal(arm.masses, [1.0, 1.0])
    limits = humanoid.upper_torque_limits
    assert limits.shape == (8,)
    np.testing.assert_array_equal(limits[:4], humanoid.arm("left").torque_limits)
    np.testing.assert_array_equal(limits[4:], humanoid.arm("right").torque_limits)


def test_serialized_model_parses_back_identical(humanoid):
    assert parse_model(serialize_model(humanoid)) == humanoid


def test_load_model_from_file(tmp_path):
    path = tmp_path / "arm.toml"
    path.write_text(TOY_TEXT, encoding="utf-8")
    assert load_model(path).name == "toy-arm"
    assert resolve_model(str(path)).name == "toy-arm"


def test_malformed_file_is_format_error():
    with pytest.raises(ModelFormatError):
        parse_model("[base\nname = 1")


def test_missing_file_is_format_error(tmp_path):
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "nope.toml")


def test_unknown_model_name():
    with pytest.raises(ModelFormatError, match="unknown model"):
        resolve_model("no-such-robot")


def test_unknown_key_names_field():
    text = TOY_TEXT.replace('name = "elbow"', 'name = "elbow"\ncolour = "red"')
    with pytest.raises(ModelValidationError) as info:
        parse_model(text)
    assert info.value.field == "colour"


def test_unknown_section_rejected():
    with pytest.raises(ModelValidationError):
        parse_model(TOY_TEXT + "\n[sensors]\nimu = true\n")


def test_inverted_limits_rejected():
    text = TOY_TEXT.replace("position_limits = [-2.6, 2.6]", "position_limits = [2.6, -2.6]")
    with pytest.raises(ModelValidationError, match="position_limits"):
        parse_model(text)


def test_default_outside_limits_rejected():
    text = TOY_TEXT.replace("position_limits = [-2.6, 2.6]", "position_limits = [0.5, 2.6]")
    with pytest.raises(ModelValidationError, match="default_position"):
        parse_model(text)


def test_negative_torque_limit_rejected():
    with pytest.raises(ModelValidationError) as info:
        parse_model(TOY_TEXT.replace("torque_limit = 5.0", "torque_limit = -5.0"))
    assert info.value.field == "torque_limit"


def test_non_unit_axis_rejected():
    text = TOY_TEXT.replace("axis = [0.0, -1.0, 0.0]\norigin_translation = [0.3", "axis = [0.0, -2.0, 0.0]\norigin_translation = [0.3")
    with pytest.raises(ModelValidationError, match="unit norm"):
        parse_model(text)


def test_duplicate_joint_name_rejected():
    text = TOY_TEXT.replace('name = "elbow"', 'name = "shoulder"')
    with pytest.raises(ModelValidationError) as info:
        parse_model(text)
    assert info.value.field == "shoulder"


def test_broken_chain_rejected():
    text = TOY_TEXT.replace('parent = "upper"', 'parent = "nowhere"')
    with pytest.raises(ModelValidationError):
        parse_model(text)


def test_missing_base_section():
    body = TOY_TEXT.split("[[arm]]", 1)[1]
    with pytest.raises(ModelFormatError, match="base"):
        parse_model("[[arm]]" + body)


def test_builtin_models_are_parsed_once(monkeypatch):
    first = resolve_model("toy-arm")

    def fail(path):
        raise AssertionError(f"{path} parsed again")

    monkeypatch.setattr("forceadapt.robot_model.load_model", fail)
    assert resolve_model("toy-arm") is first
    assert {m.name for m in builtin_models()} >= {"toy-arm", "mini-humanoid"}
