"""
Cross-modal adaptive modulation.

For one frame V (H x W x C_V) and word features L (N x C_L):

    V' = Conv2d_1x1(V)            -> HW x C_M
    L' = Conv1d_1(L)              -> N x C_M
    A  = L' V'^T                  -> N x HW
    w  = row sums of A            -> N
    w~ = softmax(w / max(|w|, eps))
    l  = sum_k w~_k L_k           -> C_L
    out = V + V * sigmoid(Linear(l))

The temporal branch applies the same computation to every frame separately.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from errors import DataValidationError, UsageError
from nn import ParameterStore
from tensor import (
    Tensor,
    broadcast_mul,
    conv1d,
    conv2d,
    guarded_normalize,
    linear,
    matmul,
    sigmoid,
    softmax,
    stack,
)
from text_encoder import WordFeatures
from visual_encoders import StageFeature

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
WEIGHT_SUM_TOLERANCE = 1e-9


@dataclass
class AttentionDiagnostics:
    A: Tensor  # N x HW
    omega: Tensor  # N
    omega_tilde: Tensor  # N


class CrossModalModulation:
    """CMAM parameters and computation for one encoder stage of one branch."""

    def __init__(self, store: ParameterStore, branch: str, stage: int, c_v: int, c_l: int, c_m: int):
        self.branch = branch
        self.stage = stage
        prefix = f"cmam.{branch}.stage{stage}"
        self.visual_proj = store.create(f"{prefix}.visual_proj.weight", (1, 1, c_v, c_m), fan_in=c_v)
        self.word_proj = store.create(f"{prefix}.word_proj.weight", (1, c_l, c_m), fan_in=c_l)
        self.linear_weight = store.create(f"{prefix}.linear.weight", (c_l, c_v))
        self.linear_bias = store.create(f"{prefix}.linear.bias", (c_v,), zeros=True)

    def word_relevance(self, V: Tensor, L: Tensor) -> AttentionDiagnostics:
        h, w, _ = V.shape
        visual = conv2d(V, self.visual_proj).reshape(h * w, -1)
        words = conv1d(L, self.word_proj)
        A = matmul(words, visual.T)
        omega = A.sum(axis=1)
        omega_tilde = softmax(guarded_normalize(omega, NORM_EPS), axis=-1)
        return AttentionDiagnostics(A=A, omega=omega, omega_tilde=omega_tilde)

    def adaptive_sentence(self, L: Tensor, omega_tilde: Tensor) -> Tensor:
        return adaptive_sentence(L, omega_tilde)

    def modulate(self, V: Tensor, sentence: Tensor) -> Tensor:
        gate = sigmoid(linear(sentence, self.linear_weight, self.linear_bias))
        return V + broadcast_mul(V, gate)

    def _frame(self, V: Tensor, words: WordFeatures) -> Tuple[Tensor, AttentionDiagnostics]:
        diagnostics = self.word_relevance(V, words.L)
        sentence = self.adaptive_sentence(words.L, diagnostics.omega_tilde)
        return self.modulate(V, sentence), diagnostics

    def _check(self, feature: StageFeature, kind: str) -> None:
        if feature.kind != kind or feature.stage != self.stage:
            raise UsageError(
                f"CMAM for {kind} stage {self.stage} got a {feature.kind} stage {feature.stage} feature")

    def forward_spatial(self, feature: StageFeature, words: WordFeatures) -> Tuple[StageFeature, List[AttentionDiagnostics]]:
        self._check(feature, "spatial")
        out, diagnostics = self._frame(feature.tensor, words)
        return StageFeature(stage=feature.stage, kind="spatial", tensor=out), [diagnostics]

    def forward_temporal(self, feature: StageFeature, words: WordFeatures) -> Tuple[StageFeature, List[AttentionDiagnostics]]:
        self._check(feature, "temporal")
        frames, diagnostics = [], []
        for t in range(feature.shape[0]):
            out, diag = self._frame(feature.tensor[t], words)
            frames.append(out)
            diagnostics.append(diag)
        return StageFeature(stage=feature.stage, kind="temporal", tensor=stack(frames, axis=0)), diagnostics


def word_relevance(V: Tensor, L: Tensor, params: CrossModalModulation) -> AttentionDiagnostics:
    return params.word_relevance(V, L)


def adaptive_sentence(L: Tensor, omega_tilde: Tensor) -> Tensor:
    """Convex combination of the word rows of L."""
    total = float(omega_tilde.data.sum())
    if abs(total - 1.0) > WEIGHT_SUM_TOLERANCE:
        raise DataValidationError(f"word weights must sum to 1, got {total:.12f}")
    n = omega_tilde.shape[0]
    return matmul(omega_tilde.reshape(1, n), L).reshape(L.shape[1])


def modulate(V: Tensor, sentence: Tensor, params: CrossModalModulation) -> Tensor:
    return params.modulate(V, sentence)


def cmam_spatial(feature: StageFeature, words: WordFeatures, params: CrossModalModulation) -> StageFeature:
    return params.forward_spatial(feature, words)[0]


def cmam_temporal(feature: StageFeature, words: WordFeatures, params: CrossModalModulation) -> StageFeature:
    return params.forward_temporal(feature, words)[0]


def dump_attention(
    diagnostics: AttentionDiagnostics,
    height: int,
    width: int,
    tokens: Sequence[str],
    out_dir: Union[str, Path],
    tag: str = "attention",
) -> List[Path]:
    """Write one 0..255 PGM heatmap per word of A for visual inspection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, token in enumerate(tokens):
        row = diagnostics.A.data[k].reshape(height, width)
        span = row.max() - row.min()
        scaled = np.zeros_like(row) if span == 0 else (row - row.min()) / span
        path = out_dir / f"{tag}_{k:02d}_{token}.pgm"
        Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path, format="PPM")
        paths.append(path)
    logger.debug("Wrote %d attention maps to %s", len(paths), out_dir)
    return paths
