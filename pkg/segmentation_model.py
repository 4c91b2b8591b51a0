"""
Model assembly for every ablation variant.

    spatial_only / temporal_only   one encoder, concat language path, own decoder
    both_concat                    both encoders, concat path, add or max fusion
    both_lgfs                      both encoders, concat path, LGFS fusion
    full                           both encoders, CMAM at cmam_stages, LGFS fusion

Stages without CMAM keep the concat path so language reaches every decoder stage.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from cmam import AttentionDiagnostics, CrossModalModulation
from lgfs_decoder import ConcatProjection, Decoder, DecoderState, LanguageGuidedSelection, fusion_variant
from models import ExperimentConfig, FusionMode
from nn import ParameterStore, make_rng
from tensor import Tensor, bce_with_logits, mac_scope, sigmoid
from text_encoder import GruTextEncoder, Query, WordFeatures, build_embedding
from visual_encoders import SpatialEncoder, StageFeature, TemporalEncoder, target_index, target_slice

logger = logging.getLogger(__name__)

BRANCHES = ("spatial", "temporal")


def encoder_prefixes(branch: str) -> Tuple[str, ...]:
    return (f"{branch}_encoder.", f"text.{branch}.")


def frozen_prefixes(branches: Sequence[str], freeze_cmam: bool = True) -> Tuple[str, ...]:
    """Parameter-name prefixes held fixed while the joint decoder is finetuned."""
    prefixes = ["text.embedding"]
    for branch in branches:
        prefixes += encoder_prefixes(branch)
        if freeze_cmam:
            prefixes.append(f"cmam.{branch}.")
    return tuple(prefixes)


def transferable_prefixes(branches: Sequence[str]) -> Tuple[str, ...]:
    return frozen_prefixes(branches, freeze_cmam=True)


@dataclass
class ModelOutput:
    logits: Tensor
    state: DecoderState
    words: Dict[str, WordFeatures]
    attention: Dict[Tuple[str, int], List[AttentionDiagnostics]] = field(default_factory=dict)


class ActorSegmentationModel:
    def __init__(
        self,
        config: ExperimentConfig,
        vocab_size: int,
        store: Optional[ParameterStore] = None,
        branches: Optional[Sequence[str]] = None,
        head_prefix: str = "",
    ):
        self.config = config
        self.branches = tuple(branches or config.branches)
        self.store = store or ParameterStore(make_rng(config.seed), init_scale=config.init_scale)
        self.fusion = config.effective_fusion if len(self.branches) == 2 else None
        ladder = config.ladder
        stages = range(1, len(ladder) + 1)

        table = build_embedding(self.store, vocab_size, config.embed_dim)
        self.text = {b: GruTextEncoder(self.store, f"text.{b}.gru", table, config.c_l) for b in self.branches}
        self.encoders = {}
        if "spatial" in self.branches:
            self.encoders["spatial"] = SpatialEncoder(self.store, ladder)
        if "temporal" in self.branches:
            self.encoders["temporal"] = TemporalEncoder(self.store, ladder)
        self.cmam = {
            (b, s): CrossModalModulation(self.store, b, s, ladder[s - 1], config.c_l, config.c_m(ladder[s - 1]))
            for b in self.branches for s in config.cmam_stages
        }
        self.concat = {
            (b, s): ConcatProjection(self.store, f"{head_prefix}concat.{b}.stage{s}", ladder[s - 1], config.c_l)
            for b in self.branches for s in stages if s not in config.cmam_stages
        }
        self.lgfs = {}
        if self.fusion == FusionMode.lgfs:
            self.lgfs = {s: LanguageGuidedSelection(self.store, s, config.c_l, ladder[s - 1], prefix=f"{head_prefix}lgfs")
                         for s in stages}
        self.decoder = Decoder(self.store, ladder, prefix=f"{head_prefix}decoder",
                               head_init_scale=config.head_init_scale)

    def _hook(self, branch: str, words: WordFeatures, attention: Dict):
        def modulate(feature: StageFeature) -> StageFeature:
            params = self.cmam.get((branch, feature.stage))
            if params is None:
                return feature
            with mac_scope(f"cmam_{branch}"):
                if branch == "spatial":
                    out, diagnostics = params.forward_spatial(feature, words)
                else:
                    out, diagnostics = params.forward_temporal(feature, words)
            attention[(branch, feature.stage)] = diagnostics
            return out
        return modulate

    def encode(self, clip: np.ndarray, query: Query) -> Tuple[Dict[str, List[Tensor]], Dict[str, WordFeatures], Dict]:
        """Per-branch target-frame stage features (stage 1 first), word features and CMAM diagnostics."""
        words, features, attention = {}, {}, {}
        for branch in self.branches:
            with mac_scope(f"text_{branch}"):
                words[branch] = self.text[branch].encode(query)
            hook = self._hook(branch, words[branch], attention)
            with mac_scope(f"{branch}_encoder"):
                if branch == "spatial":
                    frame = Tensor(clip[target_index(clip.shape[0])])
                    stages = self.encoders["spatial"].forward(frame, hook)
                    features[branch] = [f.tensor for f in stages]
                else:
                    stages = self.encoders["temporal"].forward(Tensor(clip), hook)
                    features[branch] = [target_slice(f).tensor for f in stages]
        return features, words, attention

    def sentence(self, words: Dict[str, WordFeatures]) -> Tensor:
        """Sentence vector steering LGFS: the mean of the branches' pooled word features."""
        pooled = [words[b].pooled for b in self.branches]
        return pooled[0] if len(pooled) == 1 else 0.5 * (pooled[0] + pooled[1])

    def forward(self, clip: np.ndarray, query: Query) -> ModelOutput:
        features, words, attention = self.encode(clip, query)
        stages = len(self.config.ladder)
        fused = []
        with mac_scope("decoder"):
            sentence = self.sentence(words) if self.fusion == FusionMode.lgfs else None
            for i in range(stages, 0, -1):
                per_branch = []
                for branch in self.branches:
                    v = features[branch][i - 1]
                    if (branch, i) in self.concat:
                        v = self.concat[(branch, i)](v, words[branch].pooled)
                    per_branch.append(v)
                if len(per_branch) == 1:
                    fused.append(per_branch[0])
                else:
                    fused.append(fusion_variant(self.fusion, per_branch[0], per_branch[1],
                                                sentence=sentence, params=self.lgfs.get(i)))
            state = self.decoder.decode(fused)
        return ModelOutput(logits=state.logits, state=state, words=words, attention=attention)

    def loss(self, clip: np.ndarray, query: Query, mask: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        output = self.forward(clip, query)
        return bce_with_logits(output.logits, mask), output.logits.data

    def predict(self, clip: np.ndarray, query: Query) -> Tuple[np.ndarray, np.ndarray]:
        """Binary mask (sigmoid > 0.5) and raw logits for one clip."""
        logits = self.forward(clip, query).logits
        return (sigmoid(logits).data > 0.5).astype(np.uint8), logits.data

    def frozen_prefixes(self, freeze_cmam: bool = True) -> Tuple[str, ...]:
        return frozen_prefixes(self.branches, freeze_cmam)


class BranchPretraining:
    """
    Stage-1 model: one single-branch model per active branch, each with its own
    decoder, sharing only the word embedding table. The loss is the sum of branch losses.
    """

    def __init__(self, config: ExperimentConfig, vocab_size: int):
        self.config = config
        self.store = ParameterStore(make_rng(config.seed), init_scale=config.init_scale)
        self.models = {
            branch: ActorSegmentationModel(config, vocab_size, store=self.store, branches=(branch,),
                                           head_prefix=f"pretrain.{branch}.")
            for branch in config.branches
        }

    def loss(self, clip: np.ndarray, query: Query, mask: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        total, logits = None, []
        for model in self.models.values():
            loss, branch_logits = model.loss(clip, query, mask)
            total = loss if total is None else total + loss
            logits.append(branch_logits)
        return total, np.mean(logits, axis=0)

    def encoder_state(self) -> Dict[str, np.ndarray]:
        prefixes = transferable_prefixes(self.config.branches)
        return {name: array for name, array in self.store.state_dict().items() if name.startswith(prefixes)}


def build_model(config: ExperimentConfig, vocab_size: int, seed_offset: int = 0) -> ActorSegmentationModel:
    store = ParameterStore(make_rng(config.seed + seed_offset), init_scale=config.init_scale)
    return ActorSegmentationModel(config, vocab_size, store=store)
