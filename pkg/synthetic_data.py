"""
Deterministic moving-shapes clips with referring queries.

A scene holds hard-edged circles, squares and triangles that move, grow, shrink or
stay still. The query names one actor by colour, shape and action. In 'ambiguous'
scenes another actor shares the referent's look but not its action, and a third
shares its action but not its look, so neither appearance nor motion alone
identifies the referent.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import DataValidationError, GenerationError
from models import Action, ActorSpec, Color, Difficulty, SceneSpec, Shape
from nn import make_rng

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 100
MIN_ACTOR_SIZE = 4

COLOR_RGB: Dict[Color, Tuple[int, int, int]] = {
    Color.red: (255, 0, 0),
    Color.green: (0, 255, 0),
    Color.blue: (0, 0, 255),
    Color.white: (255, 255, 255),
}

ACTION_PHRASES: Dict[Action, str] = {
    Action.moving_left: "moving left",
    Action.moving_right: "moving right",
    Action.moving_up: "moving up",
    Action.moving_down: "moving down",
    Action.growing: "growing",
    Action.shrinking: "shrinking",
    Action.still: "standing still",
}

_DIRECTIONS = {
    Action.moving_left: (-1, 0),
    Action.moving_right: (1, 0),
    Action.moving_up: (0, -1),
    Action.moving_down: (0, 1),
}

APPEARANCES: List[Tuple[Shape, Color]] = [(s, c) for s in Shape for c in Color]
ACTIONS: List[Action] = list(Action)


def generator_vocabulary() -> List[str]:
    """Every word the query grammar can emit, in a fixed order."""
    words = [c.value for c in Color] + [s.value for s in Shape] + ["is"]
    for phrase in ACTION_PHRASES.values():
        for word in phrase.split():
            if word not in words:
                words.append(word)
    return words


@dataclass
class VideoSample:
    frames: np.ndarray  # T x H x W x 3, uint8
    query: str
    mask: np.ndarray  # H x W, uint8 in {0, 1}
    spec: SceneSpec
    sample_id: Optional[str] = None


def describe(actor: ActorSpec) -> str:
    return f"{actor.color.value} {actor.shape.value} is {ACTION_PHRASES[actor.action]}"


def parse_query(text: str) -> Tuple[Color, Shape, Action]:
    words = text.lower().split()
    if len(words) < 3 or words[2] != "is":
        raise DataValidationError(f"query does not follow '<color> <shape> is <action>': {text!r}")
    phrase = " ".join(words[3:])
    actions = [a for a, p in ACTION_PHRASES.items() if p == phrase]
    try:
        return Color(words[0]), Shape(words[1]), actions[0]
    except (ValueError, IndexError) as e:
        raise DataValidationError(f"unparseable query {text!r}") from e


def actor_state(actor: ActorSpec, t: int) -> Tuple[float, float, float]:
    """Center column, center row and size of an actor at frame t."""
    return actor.x + actor.velocity[0] * t, actor.y + actor.velocity[1] * t, actor.size + actor.growth * t


def rasterize(shape: Shape, cx: float, cy: float, size: float, height: int, width: int) -> np.ndarray:
    """Binary mask of pixels whose centers fall inside the shape."""
    py, px = np.mgrid[0:height, 0:width] + 0.5
    half = size / 2.0
    if shape == Shape.circle:
        return (px - cx) ** 2 + (py - cy) ** 2 <= half ** 2
    if shape == Shape.square:
        return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
    top = cy - half
    inside_rows = (py >= top) & (py <= cy + half)
    return inside_rows & (np.abs(px - cx) <= half * (py - top) / size)


def actor_mask(actor: ActorSpec, t: int, height: int, width: int) -> np.ndarray:
    cx, cy, size = actor_state(actor, t)
    return rasterize(actor.shape, cx, cy, size, height, width)


def _box(actor: ActorSpec, t: int) -> Tuple[float, float, float, float]:
    cx, cy, size = actor_state(actor, t)
    half = size / 2.0
    return cx - half, cy - half, cx + half, cy + half


def boxes_separated(a: ActorSpec, b: ActorSpec, frames: int, gap: float = 1.0) -> bool:
    for t in range(frames):
        ax0, ay0, ax1, ay1 = _box(a, t)
        bx0, by0, bx1, by1 = _box(b, t)
        if not (ax1 + gap <= bx0 or bx1 + gap <= ax0 or ay1 + gap <= by0 or by1 + gap <= ay0):
            return False
    return True


def _motion(action: Action, rng: np.random.Generator) -> Tuple[Tuple[int, int], int]:
    if action in _DIRECTIONS:
        speed = int(rng.integers(1, 3))
        dx, dy = _DIRECTIONS[action]
        return (dx * speed, dy * speed), 0
    if action == Action.growing:
        return (0, 0), 1
    if action == Action.shrinking:
        return (0, 0), -1
    return (0, 0), 0


def _size_range(action: Action, width: int, frames: int) -> Tuple[int, int]:
    low = max(MIN_ACTOR_SIZE, width // 8)
    high = max(low, width // 5)
    if action == Action.shrinking:
        floor = MIN_ACTOR_SIZE + frames - 1
        low, high = max(low, floor), max(high, floor)
    return low, high


def _place(shape: Shape, color: Color, action: Action, height: int, width: int, frames: int,
           rng: np.random.Generator) -> Optional[ActorSpec]:
    """Draw size, motion and a start position keeping the actor inside the canvas for all frames."""
    (vx, vy), growth = _motion(action, rng)
    low, high = _size_range(action, width, frames)
    size = int(rng.integers(low, high + 1))
    halves = [(size + growth * t) / 2.0 for t in range(frames)]
    x_low = max(h - vx * t for t, h in enumerate(halves))
    x_high = min(width - h - vx * t for t, h in enumerate(halves))
    y_low = max(h - vy * t for t, h in enumerate(halves))
    y_high = min(height - h - vy * t for t, h in enumerate(halves))
    x_low, x_high = int(np.ceil(x_low)), int(np.floor(x_high))
    y_low, y_high = int(np.ceil(y_low)), int(np.floor(y_high))
    if x_low > x_high or y_low > y_high:
        return None
    return ActorSpec(shape=shape, color=color, action=action,
                     x=float(rng.integers(x_low, x_high + 1)), y=float(rng.integers(y_low, y_high + 1)),
                     size=size, velocity=(vx, vy), growth=growth)


def _roles(difficulty: Difficulty, rng: np.random.Generator) -> List[Tuple[Shape, Color, Action]]:
    """(shape, color, action) per actor; index 0 is the referent."""
    def pick_action(exclude=None) -> Action:
        choices = [a for a in ACTIONS if a != exclude]
        return choices[int(rng.integers(len(choices)))]

    if difficulty == Difficulty.easy:
        count = int(rng.integers(1, 3))
        picks = rng.choice(len(APPEARANCES), size=count, replace=False)
        return [APPEARANCES[int(i)] + (pick_action(),) for i in picks]

    ref_shape, ref_color = APPEARANCES[int(rng.integers(len(APPEARANCES)))]
    ref_action = pick_action()
    others = [a for a in APPEARANCES if a != (ref_shape, ref_color)]
    twin_look = others[int(rng.integers(len(others)))]
    roles = [
        (ref_shape, ref_color, ref_action),
        (ref_shape, ref_color, pick_action(exclude=ref_action)),
        twin_look + (ref_action,),
    ]
    if rng.random() < 0.5:
        extra_look = others[int(rng.integers(len(others)))]
        roles.append(extra_look + (pick_action(),))
    return roles


def generate_scene(seed: int, difficulty: Difficulty = Difficulty.easy, height: int = 64, width: int = 64,
                   frames: int = 8) -> SceneSpec:
    rng = make_rng(seed)
    difficulty = Difficulty(difficulty)
    roles = _roles(difficulty, rng)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        actors = [_place(s, c, a, height, width, frames, rng) for s, c, a in roles]
        if any(a is None for a in actors):
            continue
        if all(boxes_separated(a, b, frames) for i, a in enumerate(actors) for b in actors[i + 1:]):
            order = [int(i) for i in rng.permutation(len(actors))]
            return SceneSpec(height=height, width=width, frames=frames,
                             actors=[actors[i] for i in order], referent=order.index(0),
                             seed=seed, difficulty=difficulty)
    raise GenerationError(f"could not place {len(roles)} actors for seed {seed} "
                          f"after {MAX_PLACEMENT_ATTEMPTS} attempts")


def render(spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Frames (T x H x W x 3 uint8) and the referent mask at the target frame."""
    frames = np.zeros((spec.frames, spec.height, spec.width, 3), dtype=np.uint8)
    for t in range(spec.frames):
        for actor in spec.actors:
            frames[t][actor_mask(actor, t, spec.height, spec.width)] = COLOR_RGB[actor.color]
    referent = spec.actors[spec.referent]
    mask = actor_mask(referent, spec.target_frame, spec.height, spec.width).astype(np.uint8)
    return frames, mask


def sample_from_spec(spec: SceneSpec, sample_id: Optional[str] = None) -> VideoSample:
    frames, mask = render(spec)
    return VideoSample(frames=frames, query=describe(spec.actors[spec.referent]), mask=mask,
                       spec=spec, sample_id=sample_id)


def generate_sample(seed: int, difficulty: Difficulty = Difficulty.easy, height: int = 64, width: int = 64,
                    frames: int = 8) -> VideoSample:
    return sample_from_spec(generate_scene(seed, difficulty, height, width, frames))
