from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from errors import ConfigError


class Shape(str, Enum):
    circle = "circle"
    square = "square"
    triangle = "triangle"


class Color(str, Enum):
    red = "red"
    green = "green"
    blue = "blue"
    white = "white"


class Action(str, Enum):
    moving_left = "moving_left"
    moving_right = "moving_right"
    moving_up = "moving_up"
    moving_down = "moving_down"
    growing = "growing"
    shrinking = "shrinking"
    still = "still"


class Difficulty(str, Enum):
    easy = "easy"
    ambiguous = "ambiguous"


class Variant(str, Enum):
    spatial_only = "spatial_only"
    temporal_only = "temporal_only"
    both_concat = "both_concat"
    both_lgfs = "both_lgfs"
    full = "full"


class FusionMode(str, Enum):
    add = "add"
    max = "max"
    lgfs = "lgfs"


# Scene generation

class ActorSpec(BaseModel):
    shape: Shape
    color: Color
    action: Action
    x: float  # center column at frame 0, pixels
    y: float  # center row at frame 0, pixels
    size: int  # side / diameter at frame 0, pixels
    velocity: Tuple[int, int] = (0, 0)  # (dx, dy) pixels per frame
    growth: int = 0  # size change per frame, pixels

    @property
    def appearance(self) -> Tuple[Shape, Color]:
        return self.shape, self.color


class SceneSpec(BaseModel):
    height: int = 64
    width: int = 64
    frames: int = 8
    actors: List[ActorSpec]
    referent: int
    seed: int
    difficulty: Difficulty = Difficulty.easy

    @model_validator(mode="after")
    def check_referent(self):
        if not 0 <= self.referent < len(self.actors):
            raise ValueError(f"referent index {self.referent} out of range for {len(self.actors)} actors")
        if self.difficulty == Difficulty.ambiguous:
            ref = self.actors[self.referent]
            others = [a for i, a in enumerate(self.actors) if i != self.referent]
            if not any(a.appearance == ref.appearance and a.action != ref.action for a in others):
                raise ValueError("ambiguous scene needs an appearance-matched distractor with another action")
            if not any(a.action == ref.action and a.appearance != ref.appearance for a in others):
                raise ValueError("ambiguous scene needs an action-matched distractor with another appearance")
        return self

    @property
    def target_frame(self) -> int:
        return self.frames // 2


class ManifestEntry(BaseModel):
    sample_id: str
    split: str


class Manifest(BaseModel):
    entries: List[ManifestEntry] = Field(default_factory=list)

    def ids(self, split: Optional[str] = None) -> List[str]:
        return [e.sample_id for e in self.entries if split is None or e.split == split]


# Experiments

class ExperimentConfig(BaseModel):
    variant: Variant = Variant.full
    fusion: Optional[FusionMode] = None
    cmam_stages: Optional[Tuple[int, ...]] = None
    frames: int = 8
    height: int = 64
    width: int = 64
    ladder: Tuple[int, ...] = (16, 32, 64, 96, 128)
    c_l: int = 64
    embed_dim: int = 32
    cm_ratio: float = 0.5
    cm_min: int = 8
    n_max: int = 20
    lr: float = 5e-4
    lr_decay_every: int = 8
    epochs_stage1: int = 12
    epochs_stage2: int = 4
    two_stage: bool = True
    freeze_cmam: bool = True
    batch_size: int = 4
    seed: int = 0
    init_scale: float = 1.0
    head_init_scale: float = 0.1
    data_dir: Optional[str] = None
    run_dir: str = "runs/default"
    checkpoint: Optional[str] = None

    @field_validator("frames")
    @classmethod
    def frames_even(cls, value: int) -> int:
        if value < 2 or value % 2:
            raise ConfigError(f"frames must be even and >= 2, got {value}")
        return value

    @field_validator("height", "width")
    @classmethod
    def power_of_two(cls, value: int) -> int:
        if value < 2 or value & (value - 1):
            raise ConfigError(f"input size must be a power of two, got {value}")
        return value

    @field_validator("batch_size", "c_l", "embed_dim", "n_max", "cm_min")
    @classmethod
    def positive(cls, value: int) -> int:
        if value < 1:
            raise ConfigError(f"value must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def check_variant(self):
        stages = len(self.ladder)
        if stages < 1 or any(c < 1 for c in self.ladder):
            raise ConfigError(f"invalid channel ladder {self.ladder}")
        if min(self.height, self.width) < 2 ** (stages - 1):
            raise ConfigError(f"{self.height}x{self.width} input too small for {stages} stride-2 stages")

        if self.variant in (Variant.spatial_only, Variant.temporal_only):
            if self.fusion is not None:
                raise ConfigError(f"fusion mode is meaningless for {self.variant.value}")
        elif self.variant == Variant.both_concat and self.fusion == FusionMode.lgfs:
            raise ConfigError("both_concat with lgfs fusion is the both_lgfs variant")
        elif self.variant == Variant.both_lgfs and self.fusion not in (None, FusionMode.lgfs):
            raise ConfigError("both_lgfs always fuses with lgfs")

        if self.cmam_stages is None:
            self.cmam_stages = tuple(range(1, stages + 1)) if self.variant == Variant.full else ()
        self.cmam_stages = tuple(sorted(set(self.cmam_stages)))
        if self.cmam_stages and self.variant != Variant.full:
            raise ConfigError(f"cmam_stages must be empty for {self.variant.value}")
        if any(not 1 <= s <= stages for s in self.cmam_stages):
            raise ConfigError(f"cmam_stages {self.cmam_stages} outside 1..{stages}")
        return self

    @property
    def branches(self) -> Tuple[str, ...]:
        if self.variant == Variant.spatial_only:
            return ("spatial",)
        if self.variant == Variant.temporal_only:
            return ("temporal",)
        return ("spatial", "temporal")

    @property
    def effective_fusion(self) -> Optional[FusionMode]:
        if len(self.branches) == 1:
            return None
        if self.fusion is not None:
            return self.fusion
        return FusionMode.add if self.variant == Variant.both_concat else FusionMode.lgfs

    @property
    def num_stages(self) -> int:
        return len(self.ladder)

    def c_m(self, c_v: int) -> int:
        return max(int(c_v * self.cm_ratio), self.cm_min)


# Evaluation

class SampleScore(BaseModel):
    sample_id: str
    intersection: int
    union: int
    iou: float
    gt_area: int = 0


class SizeBucket(BaseModel):
    count: int
    overall_iou: Optional[float] = None
    mean_iou: Optional[float] = None


class EvalReport(BaseModel):
    samples: List[SampleScore]
    overall_iou: float
    mean_iou: float
    precision_at: Dict[str, float]
    ap: float
    size_breakdown: Dict[str, SizeBucket] = Field(default_factory=dict)


class EpochLog(BaseModel):
    epoch: int
    stage: int
    mean_loss: float
    train_mean_iou: float
    seconds: float
    lr: float


class TrainLog(BaseModel):
    epochs: List[EpochLog] = Field(default_factory=list)
    reports: Dict[str, EvalReport] = Field(default_factory=dict)
    checkpoint: Optional[str] = None
    encoder_checksum_before_stage2: Optional[str] = None
    encoder_checksum_after_stage2: Optional[str] = None

    @property
    def final_loss(self) -> Optional[float]:
        return self.epochs[-1].mean_loss if self.epochs else None


# Tooling reports

class GradcheckResult(BaseModel):
    suite: str
    operation: str
    worst_relative_error: float
    tolerance: float
    checked: int
    total: int = 0

    @property
    def sampled(self) -> bool:
        return self.checked < self.total

    @property
    def passed(self) -> bool:
        return self.worst_relative_error < self.tolerance


class GradcheckReport(BaseModel):
    seed: int
    results: List[GradcheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)


class FlopsReport(BaseModel):
    by_component: Dict[str, int]
    total_macs: int
    conv_macs: int
    spatial_branch_share: float  # percent
    tallied_macs: Optional[Dict[str, int]] = None

    @property
    def verified(self) -> Optional[bool]:
        if self.tallied_macs is None:
            return None
        return self.tallied_macs == self.by_component


# Service API

class SegmentRequest(BaseModel):
    sample_id: str
    query: Optional[str] = None


class SegmentResponse(BaseModel):
    sample_id: str
    query: str
    predicted_pixels: int
    gt_pixels: int
    iou: float
    sentence_weights: Dict[str, List[float]] = Field(default_factory=dict)


class EvaluateRequest(BaseModel):
    split: str = "test"
