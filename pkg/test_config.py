import pytest

from config import dump_experiment_config, load_experiment_config
from errors import ConfigError
from models import ExperimentConfig, FusionMode, Variant


def test_defaults():
    config = load_experiment_config()
    assert config.variant == Variant.full
    assert config.cmam_stages == (1, 2, 3, 4, 5)
    assert config.effective_fusion == FusionMode.lgfs
    assert config.c_m(16) == 8 and config.c_m(128) == 64


def test_file_then_overrides(tmp_path):
    path = tmp_path / "exp.env"
    path.write_text("variant=both_concat\nfusion=max\nlr=0.001\nladder=4,8\n", encoding="utf-8")
    config = load_experiment_config(path, {"seed": 3, "fusion": "add"})
    assert config.variant == Variant.both_concat
    assert config.fusion == FusionMode.add
    assert config.lr == 0.001
    assert config.ladder == (4, 8)
    assert config.seed == 3
    assert config.cmam_stages == ()


def test_dump_and_reload(tmp_path):
    config = ExperimentConfig(variant="full", cmam_stages=(4, 5), ladder=(4, 4, 4, 4, 4), height=32, width=32)
    path = dump_experiment_config(config, tmp_path / "run" / "config.env")
    assert load_experiment_config(path) == config


def test_unknown_key(tmp_path):
    path = tmp_path / "exp.env"
    path.write_text("learning_rate=0.1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="learning_rate"):
        load_experiment_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment_config(tmp_path / "absent.env")


@pytest.mark.parametrize("overrides", [
    {"variant": "spatial_only", "fusion": "max"},
    {"variant": "both_concat", "fusion": "lgfs"},
    {"variant": "both_lgfs", "fusion": "add"},
    {"variant": "both_lgfs", "cmam_stages": "5"},
    {"cmam_stages": "6"},
    {"frames": 3},
    {"height": 48},
    {"height": 8},
    {"variant": "sideways"},
])
def test_invalid_combinations(overrides):
    with pytest.raises(ConfigError):
        load_experiment_config(overrides=overrides)


def test_direct_construction_validates():
    with pytest.raises(ValueError):
        ExperimentConfig(frames=0)


def test_single_branch_has_no_fusion():
    config = ExperimentConfig(variant="temporal_only")
    assert config.branches == ("temporal",)
    assert config.effective_fusion is None
