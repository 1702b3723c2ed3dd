import pytest

from boneage.config import dump_config, load_config, parse_config
from boneage.errors import InvalidSpec, IoError


def test_defaults_need_no_file():
    cfg = load_config(None)
    assert cfg.regress.input_side == 128 and cfg.augment.enabled


def test_unknown_keys_are_rejected():
    with pytest.raises(InvalidSpec):
        parse_config({"regress": {"learning_rate": 1.0}})
    with pytest.raises(InvalidSpec):
        parse_config({"bogus": 1})


def test_global_seed_fills_sections_without_overriding():
    cfg = parse_config({"seed": 9, "detect": {"seed": 2}})
    assert cfg.regress.seed == 9 and cfg.segment.seed == 9 and cfg.orient.flip.seed == 9
    assert cfg.augment.policy.seed == 9 and cfg.detect.seed == 2


def test_augment_section_owns_policy_settings():
    cfg = parse_config({"augment": {"enabled": False, "balance_cap": 4}})
    ens = cfg.ensemble_config()
    assert ens.augment is None and ens.balance_cap == 4
    with pytest.raises(InvalidSpec):
        parse_config({"regress": {"balance_cap": 4}})


def test_orient_heads_are_fixed():
    assert parse_config({"orient": {"flip": {"epochs": 2}}}).orient.flip.head == "flip"
    with pytest.raises(InvalidSpec):
        parse_config({"orient": {"angle": {"head": "flip"}}})


def test_yaml_round_trip(tmp_path):
    cfg = parse_config({"seed": 4, "regress": {"input_side": 64}, "augment": {"balance_cap": 3}})
    path = tmp_path / "run.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_bad_files(tmp_path):
    with pytest.raises(IoError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1,\n")
    with pytest.raises(InvalidSpec):
        load_config(bad)
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(InvalidSpec):
        load_config(bad)
