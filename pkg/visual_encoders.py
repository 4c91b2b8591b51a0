"""
Tiny spatial (2D) and temporal (3D) convolutional encoders.

Each stage concatenates the 8-channel coordinate map of its input resolution,
then runs conv(k=3, stride 2 except stage 1) -> relu -> conv(k=3) -> relu.
The temporal encoder never strides over time, so the target frame T // 2 is
well defined at every stage.
"""

from dataclasses import dataclass
from typing import Callable, List, Literal, Optional, Sequence

import numpy as np

from errors import DataValidationError, DimensionError, UsageError
from nn import ParameterStore
from tensor import Tensor, concat, conv2d, conv3d, relu

COORD_CHANNELS = 8
DEFAULT_LADDER = (16, 32, 64, 96, 128)


@dataclass(frozen=True)
class StageFeature:
    stage: int
    kind: Literal["spatial", "temporal"]
    tensor: Tensor

    @property
    def shape(self):
        return self.tensor.shape


StageHook = Callable[[StageFeature], StageFeature]


def coordinate_feature(h: int, w: int) -> Tensor:
    """
    H x W x 8 relative-position map: x at channels 0,2,4, y at 1,3,5, 1/H and 1/W at 6,7.
    """
    if h < 2 or w < 2:
        raise DataValidationError(f"coordinate feature needs h, w >= 2, got {h}x{w}")
    xs = 2.0 * np.arange(w) / (w - 1) - 1.0
    ys = 2.0 * np.arange(h) / (h - 1) - 1.0
    grid = np.empty((h, w, COORD_CHANNELS))
    grid[:, :, 0:6:2] = xs[None, :, None]
    grid[:, :, 1:6:2] = ys[:, None, None]
    grid[:, :, 6] = 1.0 / h
    grid[:, :, 7] = 1.0 / w
    return Tensor(grid)


class _Encoder:
    kind: str = ""
    kernel_rank: int = 0

    def __init__(self, store: ParameterStore, ladder: Sequence[int], prefix: str, in_channels: int = 3):
        self.ladder = tuple(ladder)
        self.prefix = prefix
        self.in_channels = in_channels
        self.blocks = []
        cin = in_channels
        for i, cout in enumerate(self.ladder, start=1):
            k = (3,) * self.kernel_rank
            first_in = cin + COORD_CHANNELS
            self.blocks.append({
                "conv1.weight": store.create(f"{prefix}.stage{i}.conv1.weight", k + (first_in, cout),
                                             fan_in=int(np.prod(k)) * first_in),
                "conv1.bias": store.create(f"{prefix}.stage{i}.conv1.bias", (cout,), zeros=True),
                "conv2.weight": store.create(f"{prefix}.stage{i}.conv2.weight", k + (cout, cout),
                                             fan_in=int(np.prod(k)) * cout),
                "conv2.bias": store.create(f"{prefix}.stage{i}.conv2.bias", (cout,), zeros=True),
            })
            cin = cout

    @property
    def num_stages(self) -> int:
        return len(self.ladder)

    def _expected_channels(self, i: int) -> int:
        return self.in_channels if i == 1 else self.ladder[i - 2]

    def _conv(self, x: Tensor, kernel: Tensor, stride: int) -> Tensor:
        raise NotImplementedError

    def _with_coordinates(self, x: Tensor, coord: Optional[Tensor]) -> Tensor:
        raise NotImplementedError

    def stage(self, i: int, x: Tensor, coord: Optional[Tensor] = None) -> StageFeature:
        if not 1 <= i <= self.num_stages:
            raise UsageError(f"{self.kind} encoder has stages 1..{self.num_stages}, got {i}")
        if x.ndim != self.kernel_rank + 1 or x.shape[-1] != self._expected_channels(i):
            raise DimensionError(
                f"{self.kind} stage {i} expects {self._expected_channels(i)} input channels, got {x.shape}")
        block = self.blocks[i - 1]
        stride = 1 if i == 1 else 2
        h = self._conv(self._with_coordinates(x, coord), block["conv1.weight"], stride) + block["conv1.bias"]
        h = relu(h)
        h = relu(self._conv(h, block["conv2.weight"], 1) + block["conv2.bias"])
        return StageFeature(stage=i, kind=self.kind, tensor=h)

    def forward(self, x: Tensor, hook: Optional[StageHook] = None) -> List[StageFeature]:
        """Run every stage; `hook` may replace a stage output before the next stage consumes it."""
        features = []
        for i in range(1, self.num_stages + 1):
            feature = self.stage(i, x)
            if hook is not None:
                feature = hook(feature)
            features.append(feature)
            x = feature.tensor
        return features


class SpatialEncoder(_Encoder):
    kind = "spatial"
    kernel_rank = 2

    def __init__(self, store: ParameterStore, ladder: Sequence[int] = DEFAULT_LADDER,
                 prefix: str = "spatial_encoder", in_channels: int = 3):
        super().__init__(store, ladder, prefix, in_channels)

    def _conv(self, x, kernel, stride):
        return conv2d(x, kernel, stride=stride, padding=1)

    def _with_coordinates(self, x, coord):
        coord = coord if coord is not None else coordinate_feature(x.shape[0], x.shape[1])
        return concat([x, coord], axis=-1)


class TemporalEncoder(_Encoder):
    kind = "temporal"
    kernel_rank = 3

    def __init__(self, store: ParameterStore, ladder: Sequence[int] = DEFAULT_LADDER,
                 prefix: str = "temporal_encoder", in_channels: int = 3):
        super().__init__(store, ladder, prefix, in_channels)

    def _conv(self, x, kernel, stride):
        return conv3d(x, kernel, stride_thw=(1, stride, stride), padding_thw=1)

    def _with_coordinates(self, x, coord):
        coord = coord if coord is not None else coordinate_feature(x.shape[1], x.shape[2])
        frames = Tensor(np.broadcast_to(coord.data, (x.shape[0],) + coord.shape))
        return concat([x, frames], axis=-1)


def spatial_stage(i: int, x: Tensor, coord: Optional[Tensor], encoder: SpatialEncoder) -> StageFeature:
    return encoder.stage(i, x, coord)


def temporal_stage(i: int, x: Tensor, coord: Optional[Tensor], encoder: TemporalEncoder) -> StageFeature:
    return encoder.stage(i, x, coord)


def target_index(frames: int) -> int:
    return frames // 2


def target_slice(feature: StageFeature) -> StageFeature:
    """Middle-frame H x W x C feature of a temporal stage."""
    if feature.kind != "temporal":
        raise UsageError(f"target_slice needs a temporal feature, got {feature.kind}")
    t = target_index(feature.shape[0])
    return StageFeature(stage=feature.stage, kind="spatial", tensor=feature.tensor[t])
