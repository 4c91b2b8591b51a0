"""
Training and evaluation.

Two-stage schedule: stage 1 trains each active branch (text encoder, visual
encoder, CMAM and its own decoder) on the segmentation loss; stage 2 loads the
pretrained encoders into a model with a freshly initialised joint decoder,
freezes them and trains only the decoder side. `two_stage=False` trains the
final model jointly from scratch for the summed epoch budget.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from checkpoint import load_checkpoint, save_checkpoint
from config import dump_experiment_config, settings
from errors import CheckpointError, DatasetError
from metrics import aggregate, iou
from models import EpochLog, EvalReport, ExperimentConfig, TrainLog
from nn import make_rng
from optim import Adam, step_decay_lr
from segmentation_model import ActorSegmentationModel, BranchPretraining, build_model
from dataset_store import read_manifest, read_mask, read_sample, read_vocabulary, write_pgm
from text_encoder import Query, Vocabulary, tokenize

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_FILE = "model.ckpt"
CONFIG_ECHO_FILE = "config.env"
TRAIN_LOG_FILE = "train_log.json"


@dataclass
class PreparedSample:
    sample_id: str
    clip: np.ndarray  # T x H x W x 3 float64 in [0, 1]
    query: Query
    mask: np.ndarray  # H x W uint8


def resolve_data_dir(config: ExperimentConfig, data_dir: Optional[PathLike] = None) -> Path:
    return Path(data_dir or config.data_dir or settings.DATA_DIR)


def load_split(data_dir: PathLike, split: Optional[str], config: ExperimentConfig,
               vocab: Vocabulary) -> List[PreparedSample]:
    """Read every sample of a split and check it against the configured clip geometry."""
    data_dir = Path(data_dir)
    samples = []
    for sample_id in read_manifest(data_dir).ids(split):
        sample = read_sample(data_dir, sample_id)
        expected = (config.frames, config.height, config.width, 3)
        if sample.frames.shape != expected:
            raise DatasetError(
                f"sample {sample_id} has clip shape {sample.frames.shape}, config expects {expected}", data_dir)
        samples.append(PreparedSample(
            sample_id=sample_id,
            clip=sample.frames.astype(np.float64) / 255.0,
            query=tokenize(sample.query, vocab, config.n_max),
            mask=sample.mask,
        ))
    return samples


def export_prediction(out_dir: PathLike, sample_id: str, mask: np.ndarray, logits: np.ndarray) -> None:
    out_dir = Path(out_dir)
    write_pgm(out_dir / f"{sample_id}.pgm", mask)
    logits.astype("<f8").tofile(out_dir / f"{sample_id}.f64")


def evaluate_model(model: ActorSegmentationModel, samples: Sequence[PreparedSample],
                   out_dir: Optional[PathLike] = None) -> EvalReport:
    """Inference (sigmoid > 0.5) over `samples`, optionally exporting masks and logits."""
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    pairs, ids = [], []
    for sample in samples:
        mask, logits = model.predict(sample.clip, sample.query)
        if out_dir is not None:
            export_prediction(out_dir, sample.sample_id, mask, logits)
        pairs.append((mask, sample.mask))
        ids.append(sample.sample_id)
    return aggregate(pairs, ids)


def rescore_predictions(pred_dir: PathLike, data_dir: PathLike, split: Optional[str] = None) -> EvalReport:
    """Score exported <id>.pgm masks against the dataset's ground truth."""
    pred_dir, data_dir = Path(pred_dir), Path(data_dir)
    pairs, ids = [], []
    for sample_id in read_manifest(data_dir).ids(split):
        path = pred_dir / f"{sample_id}.pgm"
        if not path.is_file():
            raise DatasetError(f"no prediction for sample {sample_id}", path)
        pairs.append((read_mask(path), read_mask(data_dir / sample_id / "mask.pgm")))
        ids.append(sample_id)
    return aggregate(pairs, ids)


def load_model(config: ExperimentConfig, checkpoint: PathLike, vocab_size: int) -> ActorSegmentationModel:
    model = build_model(config, vocab_size)
    try:
        model.store.load_state_dict(load_checkpoint(checkpoint), strict=True)
    except CheckpointError as e:
        raise CheckpointError(f"{checkpoint} does not fit variant {config.variant.value}: {e}") from e
    return model


def resolve_checkpoint(config: ExperimentConfig, checkpoint: Optional[PathLike] = None) -> Path:
    return Path(checkpoint or config.checkpoint or settings.CHECKPOINT or Path(config.run_dir) / CHECKPOINT_FILE)


def evaluate(
    config: ExperimentConfig,
    checkpoint: Optional[PathLike] = None,
    split: Optional[str] = "test",
    data_dir: Optional[PathLike] = None,
    out_dir: Optional[PathLike] = None,
) -> EvalReport:
    data_dir = resolve_data_dir(config, data_dir)
    vocab = read_vocabulary(data_dir)
    model = load_model(config, resolve_checkpoint(config, checkpoint), len(vocab))
    samples = load_split(data_dir, split, config, vocab)
    if not samples:
        raise DatasetError(f"split '{split}' is empty", data_dir)
    report = evaluate_model(model, samples, out_dir)
    logger.info("Evaluated %d %s samples: mean IoU %.4f", len(samples), split, report.mean_iou)
    return report


class TrainingService:
    def __init__(self, config: ExperimentConfig, data_dir: Optional[PathLike] = None):
        self.config = config
        self.data_dir = resolve_data_dir(config, data_dir)
        self.run_dir = Path(config.run_dir)
        self.model: Optional[ActorSegmentationModel] = None

    def _run_epochs(self, trainable, optimizer: Adam, samples: Sequence[PreparedSample], epochs: int,
                    stage: int, log: TrainLog) -> None:
        config = self.config
        for local_epoch in range(1, epochs + 1):
            epoch = len(log.epochs) + 1
            optimizer.lr = step_decay_lr(config.lr, local_epoch, config.lr_decay_every)
            order = make_rng(config.seed * 1000 + epoch).permutation(len(samples))
            started = time.perf_counter()
            losses, ious = [], []
            for start in range(0, len(order), config.batch_size):
                batch = [samples[int(i)] for i in order[start:start + config.batch_size]]
                trainable.store.zero_grad()
                for sample in batch:
                    loss, logits = trainable.loss(sample.clip, sample.query, sample.mask)
                    (loss * (1.0 / len(batch))).backward()
                    losses.append(loss.item())
                    ious.append(iou((logits > 0).astype(np.uint8), sample.mask))
                optimizer.step()
                logger.debug("epoch %d batch %d loss %.6f", epoch, start // config.batch_size, losses[-1])
            entry = EpochLog(epoch=epoch, stage=stage, mean_loss=float(np.mean(losses)),
                             train_mean_iou=float(np.mean(ious)), seconds=time.perf_counter() - started,
                             lr=optimizer.lr)
            log.epochs.append(entry)
            logger.info("Stage %d epoch %d: loss %.4f, train mean IoU %.4f (%.1fs)",
                        stage, epoch, entry.mean_loss, entry.train_mean_iou, entry.seconds)

    def train(self) -> TrainLog:
        config = self.config
        vocab = read_vocabulary(self.data_dir)
        train_samples = load_split(self.data_dir, "train", config, vocab)
        if not train_samples:
            raise DatasetError("training split is empty", self.data_dir)
        test_samples = load_split(self.data_dir, "test", config, vocab)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        dump_experiment_config(config, self.run_dir / CONFIG_ECHO_FILE)

        log = TrainLog()
        if config.two_stage:
            pretraining = BranchPretraining(config, len(vocab))
            optimizer = Adam(pretraining.store, lr=config.lr)
            self._run_epochs(pretraining, optimizer, train_samples, config.epochs_stage1, 1, log)

            model = build_model(config, len(vocab), seed_offset=1)
            loaded = model.store.load_state_dict(pretraining.encoder_state(), strict=False)
            logger.info("Transferred %d pretrained encoder parameters", len(loaded))
            frozen = model.frozen_prefixes(config.freeze_cmam)
            log.encoder_checksum_before_stage2 = model.store.checksum(frozen)
            model.store.set_trainable(frozen, False)
            optimizer = Adam(model.store.without_prefix(frozen), lr=config.lr)
            self._run_epochs(model, optimizer, train_samples, config.epochs_stage2, 2, log)
            model.store.set_trainable(frozen, True)
            log.encoder_checksum_after_stage2 = model.store.checksum(frozen)
        else:
            model = build_model(config, len(vocab))
            optimizer = Adam(model.store, lr=config.lr)
            self._run_epochs(model, optimizer, train_samples, config.epochs_stage1 + config.epochs_stage2, 1, log)

        self.model = model
        log.checkpoint = str(save_checkpoint(self.run_dir / CHECKPOINT_FILE, model.store.state_dict()))
        log.reports["train"] = evaluate_model(model, train_samples)
        if test_samples:
            log.reports["test"] = evaluate_model(model, test_samples)
        (self.run_dir / TRAIN_LOG_FILE).write_text(log.model_dump_json(indent=2), encoding="utf-8")
        return log


def train(config: ExperimentConfig, data_dir: Optional[PathLike] = None) -> TrainLog:
    return TrainingService(config, data_dir).train()
