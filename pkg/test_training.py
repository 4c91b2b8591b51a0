"""
End-to-end training tests on a tiny generated dataset. The full-size
runs are skipped unless ASEG_RUN_SLOW=1.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from checkpoint import save_checkpoint
from config import load_experiment_config
from dataset_store import read_vocabulary, write_dataset
from errors import CheckpointError, DatasetError
from models import Difficulty, ExperimentConfig
from segmentation_model import build_model
from training_service import (
    CHECKPOINT_FILE,
    CONFIG_ECHO_FILE,
    TRAIN_LOG_FILE,
    evaluate,
    evaluate_model,
    load_split,
    rescore_predictions,
    train,
)

TINY = dict(frames=2, height=32, width=32, ladder=(2, 2, 2), c_l=4, embed_dim=3, cm_min=2,
            epochs_stage1=1, epochs_stage2=1, batch_size=2, lr=1e-3)


def _config(run_dir, **overrides):
    return ExperimentConfig(**{**TINY, "run_dir": str(run_dir), **overrides})


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_dataset(root, n_train=4, n_test=2, seed=0, height=32, width=32, frames=2)
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    config = _config(tmp_path_factory.mktemp("run"))
    return config, train(config, data_dir)


def test_run_directory_contents(trained):
    config, log = trained
    for name in (CHECKPOINT_FILE, CONFIG_ECHO_FILE, TRAIN_LOG_FILE):
        assert (Path(config.run_dir) / name).is_file()
    assert [(e.epoch, e.stage) for e in log.epochs] == [(1, 1), (2, 2)]
    assert set(log.reports) == {"train", "test"}
    assert all(np.isfinite(e.mean_loss) for e in log.epochs)


def test_frozen_encoders_do_not_change(trained):
    _, log = trained
    assert log.encoder_checksum_before_stage2 == log.encoder_checksum_after_stage2


def test_frozen_parameters_get_no_gradient(data_dir, tmp_path):
    config = _config(tmp_path)
    vocab = read_vocabulary(data_dir)
    sample = load_split(data_dir, "train", config, vocab)[0]
    model = build_model(config, len(vocab))
    frozen = model.store.set_trainable(model.frozen_prefixes(), False)
    loss, _ = model.loss(sample.clip, sample.query, sample.mask)
    loss.backward()
    assert frozen and all(p.grad is None for p in frozen)
    trainable = model.store.without_prefix(model.frozen_prefixes())
    assert any(p.grad is not None and np.any(p.grad) for p in trainable)
    model.store.set_trainable(model.frozen_prefixes(), True)
    assert all(p.requires_grad for p in model.store)


def test_cmam_can_keep_training(data_dir, tmp_path):
    log = train(_config(tmp_path, freeze_cmam=False), data_dir)
    assert log.encoder_checksum_before_stage2 == log.encoder_checksum_after_stage2
    assert "freeze_cmam=False" in (tmp_path / CONFIG_ECHO_FILE).read_text(encoding="utf-8")


def test_training_is_deterministic(trained, tmp_path, data_dir):
    config, log = trained
    again = train(config.model_copy(update={"run_dir": str(tmp_path / "again")}), data_dir)
    assert again.final_loss == log.final_loss
    first = (Path(config.run_dir) / CHECKPOINT_FILE).read_bytes()
    assert (tmp_path / "again" / CHECKPOINT_FILE).read_bytes() == first


def test_evaluate_reproduces_training_report(trained, data_dir):
    config, log = trained
    assert evaluate(config, split="train", data_dir=data_dir) == log.reports["train"]


def test_exported_masks_rescore_identically(trained, data_dir, tmp_path):
    config, _ = trained
    report = evaluate(config, split="test", data_dir=data_dir, out_dir=tmp_path / "pred")
    rescored = rescore_predictions(tmp_path / "pred", data_dir, "test")
    assert rescored.precision_at == report.precision_at
    assert rescored.overall_iou == report.overall_iou
    sample_id = report.samples[0].sample_id
    assert (tmp_path / "pred" / f"{sample_id}.f64").stat().st_size == 32 * 32 * 8


def test_initial_loss_near_log_two(data_dir, tmp_path):
    config = _config(tmp_path)
    vocab = read_vocabulary(data_dir)
    sample = load_split(data_dir, "train", config, vocab)[0]
    loss, _ = build_model(config, len(vocab)).loss(sample.clip, sample.query, sample.mask)
    assert abs(loss.item() - math.log(2)) < 0.2 * math.log(2)


def test_zero_head_predicts_nothing(data_dir, tmp_path):
    config = _config(tmp_path)
    vocab = read_vocabulary(data_dir)
    model = build_model(config, len(vocab))
    model.decoder.head_weight.data[...] = 0.0
    model.decoder.head_bias.data[...] = 0.0
    report = evaluate_model(model, load_split(data_dir, "test", config, vocab))
    assert report.mean_iou == 0.0
    assert report.precision_at["0.5"] == 0.0


def test_joint_schedule(data_dir, tmp_path):
    log = train(_config(tmp_path, two_stage=False), data_dir)
    assert [(e.epoch, e.stage) for e in log.epochs] == [(1, 1), (2, 1)]
    assert log.encoder_checksum_before_stage2 is None


def test_missing_dataset(tmp_path):
    with pytest.raises(DatasetError):
        train(_config(tmp_path / "run"), tmp_path / "absent")


def test_geometry_mismatch(data_dir, tmp_path):
    with pytest.raises(DatasetError):
        train(_config(tmp_path, frames=4), data_dir)


def test_checkpoint_from_another_variant(trained, data_dir):
    config, _ = trained
    other = ExperimentConfig(**{**config.model_dump(), "variant": "spatial_only", "cmam_stages": ()})
    with pytest.raises(CheckpointError):
        evaluate(other, checkpoint=Path(config.run_dir) / CHECKPOINT_FILE, data_dir=data_dir)


def test_corrupt_checkpoint(data_dir, tmp_path):
    config = _config(tmp_path)
    path = save_checkpoint(tmp_path / CHECKPOINT_FILE, {"nothing": np.zeros(1)})
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(CheckpointError):
        evaluate(config, checkpoint=path, data_dir=data_dir)


QUICK_CONFIG = Path(__file__).parent / "experiment_quick.env"
SLOW = pytest.mark.skipif(os.getenv("ASEG_RUN_SLOW") != "1", reason="set ASEG_RUN_SLOW=1 for the full-size runs")
TIME_BUDGET_SECONDS = 30 * 60


@SLOW
def test_easy_split_learns_within_budget(tmp_path):
    data = tmp_path / "data"
    write_dataset(data, n_train=200, n_test=50, seed=0, difficulty=Difficulty.easy)
    config = load_experiment_config(QUICK_CONFIG, {"run_dir": str(tmp_path / "run")})
    assert config.epochs_stage1 + config.epochs_stage2 <= 30
    started = time.perf_counter()
    log = train(config, data)
    assert time.perf_counter() - started < TIME_BUDGET_SECONDS
    assert log.reports["test"].mean_iou >= 0.5
    assert log.reports["train"].mean_iou > 0.9


@SLOW
def test_full_model_beats_spatial_baseline_on_ambiguous_scenes(tmp_path):
    data = tmp_path / "data"
    write_dataset(data, n_train=200, n_test=50, seed=0, difficulty=Difficulty.ambiguous)
    scores = {}
    for variant in ("spatial_only", "full"):
        config = load_experiment_config(QUICK_CONFIG, {"variant": variant, "run_dir": str(tmp_path / variant)})
        scores[variant] = train(config, data).reports["test"].mean_iou
    assert scores["full"] >= scores["spatial_only"] - 0.01
