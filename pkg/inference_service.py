import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

from config import load_experiment_config, settings
from dataset_store import read_sample, read_vocabulary
from errors import UsageError
from flops import flops
from metrics import iou
from models import EvalReport, ExperimentConfig, FlopsReport, SegmentResponse
from segmentation_model import ActorSegmentationModel
from tensor import sigmoid
from text_encoder import Vocabulary, tokenize
from training_service import CONFIG_ECHO_FILE, evaluate_model, load_model, load_split, resolve_checkpoint, resolve_data_dir
from visual_encoders import target_index

logger = logging.getLogger(__name__)


class InferenceService:
    """Holds one trained model and answers segmentation and evaluation requests against a dataset."""

    def __init__(
        self,
        config: Optional[ExperimentConfig] = None,
        checkpoint: Optional[Union[str, Path]] = None,
        data_dir: Optional[Union[str, Path]] = None,
    ):
        if config is None:
            echoed = Path(settings.RUN_DIR) / CONFIG_ECHO_FILE
            config = load_experiment_config(echoed if echoed.is_file() else None)
        self.config = config
        self.checkpoint = resolve_checkpoint(config, checkpoint)
        self.data_dir = resolve_data_dir(config, data_dir)
        self.vocab: Optional[Vocabulary] = None
        self.model: Optional[ActorSegmentationModel] = None

    @property
    def ready(self) -> bool:
        return self.model is not None

    def load(self) -> "InferenceService":
        self.vocab = read_vocabulary(self.data_dir)
        self.model = load_model(self.config, self.checkpoint, len(self.vocab))
        logger.info("Loaded %s model from %s", self.config.variant.value, self.checkpoint)
        return self

    def _require_model(self) -> ActorSegmentationModel:
        if self.model is None:
            raise UsageError("no model loaded")
        return self.model

    def segment(self, sample_id: str, query: Optional[str] = None) -> SegmentResponse:
        model = self._require_model()
        sample = read_sample(self.data_dir, sample_id)
        text = query or sample.query
        output = model.forward(sample.frames / 255.0, tokenize(text, self.vocab, self.config.n_max))
        predicted = (sigmoid(output.logits).data > 0.5).astype("uint8")

        weights: Dict[str, List[float]] = {}
        for (branch, stage), diagnostics in sorted(output.attention.items()):
            frame = diagnostics[0] if len(diagnostics) == 1 else diagnostics[target_index(len(diagnostics))]
            weights[f"{branch}.stage{stage}"] = frame.omega_tilde.data.tolist()
        return SegmentResponse(
            sample_id=sample_id,
            query=text,
            predicted_pixels=int(predicted.sum()),
            gt_pixels=int(sample.mask.sum()),
            iou=iou(predicted, sample.mask),
            sentence_weights=weights,
        )

    def evaluate(self, split: str = "test") -> EvalReport:
        model = self._require_model()
        samples = load_split(self.data_dir, split, self.config, self.vocab)
        if not samples:
            raise UsageError(f"split '{split}' has no samples")
        return evaluate_model(model, samples)

    def flops(self) -> FlopsReport:
        return flops(self.config, verify=False)
