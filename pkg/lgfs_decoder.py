import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from errors import DimensionError, UsageError
from models import FusionMode
from nn import ParameterStore
from tensor import (
    Tensor,
    broadcast_mul,
    concat,
    conv2d,
    linear,
    maximum,
    sigmoid,
    upsample_bilinear_2x,
)

logger = logging.getLogger(__name__)


class LanguageGuidedSelection:
    """Per-stage pair of C_L -> C_V maps whose per-channel softmax mixes the two branches."""

    def __init__(self, store: ParameterStore, stage: int, c_l: int, c_v: int, prefix: str = "lgfs"):
        self.stage = stage
        base = f"{prefix}.stage{stage}"
        self.weight_s = store.create(f"{base}.linear_s.weight", (c_l, c_v))
        self.bias_s = store.create(f"{base}.linear_s.bias", (c_v,), zeros=True)
        self.weight_t = store.create(f"{base}.linear_t.weight", (c_l, c_v))
        self.bias_t = store.create(f"{base}.linear_t.bias", (c_v,), zeros=True)

    def raw_weights(self, sentence: Tensor) -> Tuple[Tensor, Tensor]:
        return (linear(sentence, self.weight_s, self.bias_s),
                linear(sentence, self.weight_t, self.bias_t))

    def selection_weights(self, sentence: Tensor) -> Tuple[Tensor, Tensor]:
        g_s, g_t = self.raw_weights(sentence)
        return pair_softmax(g_s, g_t)


def pair_softmax(g_s: Tensor, g_t: Tensor) -> Tuple[Tensor, Tensor]:
    """Softmax over each (spatial, temporal) channel pair."""
    w_s = sigmoid(g_s - g_t)
    return w_s, 1.0 - w_s


def selection_weights(sentence: Tensor, params: LanguageGuidedSelection) -> Tuple[Tensor, Tensor]:
    return params.selection_weights(sentence)


def fuse(v_s: Tensor, v_t: Tensor, w_s: Tensor, w_t: Tensor) -> Tensor:
    if v_s.shape != v_t.shape:
        raise DimensionError(f"cannot fuse spatial {v_s.shape} with temporal {v_t.shape}")
    return broadcast_mul(v_s, w_s) + broadcast_mul(v_t, w_t)


def fusion_variant(
    mode: FusionMode,
    v_s: Tensor,
    v_t: Tensor,
    sentence: Optional[Tensor] = None,
    params: Optional[LanguageGuidedSelection] = None,
) -> Tensor:
    mode = FusionMode(mode)
    if v_s.shape != v_t.shape:
        raise DimensionError(f"cannot fuse spatial {v_s.shape} with temporal {v_t.shape}")
    if mode == FusionMode.add:
        return v_s + v_t
    if mode == FusionMode.max:
        return maximum(v_s, v_t)
    if params is None or sentence is None:
        raise UsageError("lgfs fusion needs selection parameters and a sentence vector")
    return fuse(v_s, v_t, *params.selection_weights(sentence))


class ConcatProjection:
    """Baseline language path: [V ; broadcast l] -> 1x1 conv back to C_V channels."""

    def __init__(self, store: ParameterStore, name: str, c_v: int, c_l: int):
        self.weight = store.create(f"{name}.weight", (1, 1, c_v + c_l, c_v), fan_in=c_v + c_l)
        self.bias = store.create(f"{name}.bias", (c_v,), zeros=True)

    def __call__(self, v: Tensor, sentence: Tensor) -> Tensor:
        h, w, _ = v.shape
        tiled = sentence + Tensor(np.zeros((h, w, sentence.shape[0])))
        return conv2d(concat([v, tiled], axis=-1), self.weight) + self.bias


@dataclass
class DecoderState:
    fused: Dict[int, Tensor] = field(default_factory=dict)
    decoded: Dict[int, Tensor] = field(default_factory=dict)
    logits: Optional[Tensor] = None


class Decoder:
    """
    Top-down decoder: V_D^top = V_F^top and
    V_D^i = V_F^i + upsample(project(V_D^{i+1})) below it, then a 1x1 head to one logit.
    """

    def __init__(self, store: ParameterStore, ladder: Sequence[int], prefix: str = "decoder",
                 head_init_scale: float = 0.1):
        self.ladder = tuple(ladder)
        self.projections = {
            i: store.create(f"{prefix}.stage{i}.project.weight", (1, 1, self.ladder[i], self.ladder[i - 1]),
                            fan_in=self.ladder[i])
            for i in range(1, len(self.ladder))
        }
        self.head_weight = store.create(f"{prefix}.head.weight", (1, 1, self.ladder[0], 1),
                                        fan_in=self.ladder[0], scale=head_init_scale)
        self.head_bias = store.create(f"{prefix}.head.bias", (1,), zeros=True)

    def channel_project(self, decoded: Tensor, stage: int) -> Tensor:
        """Map V_D^{stage+1} channels onto stage `stage`'s channel count."""
        return conv2d(decoded, self.projections[stage])

    def decode(self, fused_top_down: Sequence[Tensor]) -> DecoderState:
        stages = len(self.ladder)
        if len(fused_top_down) != stages:
            raise DimensionError(f"decoder expects {stages} fused features, got {len(fused_top_down)}")
        for i, feature in zip(range(stages, 0, -1), fused_top_down):
            if feature.ndim != 3 or feature.shape[-1] != self.ladder[i - 1]:
                raise DimensionError(f"fused stage {i} has shape {feature.shape}, ladder expects {self.ladder[i - 1]} channels")

        state = DecoderState()
        decoded = fused_top_down[0]
        state.fused[stages] = decoded
        state.decoded[stages] = decoded
        for i, fused in zip(range(stages - 1, 0, -1), fused_top_down[1:]):
            upsampled = upsample_bilinear_2x(self.channel_project(decoded, i))
            if upsampled.shape != fused.shape:
                raise DimensionError(f"stage {i}: upsampled {upsampled.shape} vs fused {fused.shape}")
            decoded = fused + upsampled
            state.fused[i] = fused
            state.decoded[i] = decoded
        h, w, _ = decoded.shape
        state.logits = (conv2d(decoded, self.head_weight) + self.head_bias).reshape(h, w)
        return state


def decode(fused_top_down: Sequence[Tensor], decoder: Decoder) -> DecoderState:
    return decoder.decode(fused_top_down)
