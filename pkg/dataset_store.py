"""
On-disk dataset layout (documented byte-level in docs/DATASET_FORMAT.md):

    <root>/manifest.txt            "<sample id> <split>" per line
    <root>/vocab.txt               one token per line, id = line index + 2
    <root>/<id>/frame_00.ppm ...   P6, 8-bit RGB
    <root>/<id>/mask.pgm           P5, 0/255 referent mask at the target frame
    <root>/<id>/query.txt          UTF-8, one line
    <root>/<id>/spec.txt           key=value scene description
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from dotenv import dotenv_values
from PIL import Image

from errors import DatasetError, GenerationError
from models import ActorSpec, Difficulty, Manifest, ManifestEntry, SceneSpec
from synthetic_data import VideoSample, generate_scene, generator_vocabulary, sample_from_spec
from text_encoder import Vocabulary

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MANIFEST_FILE = "manifest.txt"
VOCAB_FILE = "vocab.txt"


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    try:
        Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(path, format="PPM")
    except OSError as e:
        raise DatasetError(f"cannot write frame: {e}", path) from e


def write_pgm(path: PathLike, mask: np.ndarray) -> None:
    """Binary mask (any nonzero = foreground) as a 0/255 P5 file."""
    pixels = np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)
    try:
        Image.fromarray(pixels, mode="L").save(path, format="PPM")
    except OSError as e:
        raise DatasetError(f"cannot write mask: {e}", path) from e


def read_image(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as image:
            return np.asarray(image).copy()
    except OSError as e:
        raise DatasetError(f"cannot read image: {e}", path) from e


def read_mask(path: PathLike) -> np.ndarray:
    return (read_image(path) > 127).astype(np.uint8)


def encode_spec(spec: SceneSpec) -> str:
    lines = [
        f"seed={spec.seed}",
        f"difficulty={spec.difficulty.value}",
        f"height={spec.height}",
        f"width={spec.width}",
        f"frames={spec.frames}",
        f"referent={spec.referent}",
        f"actors={len(spec.actors)}",
    ]
    for i, actor in enumerate(spec.actors):
        lines += [
            f"actor{i}.shape={actor.shape.value}",
            f"actor{i}.color={actor.color.value}",
            f"actor{i}.action={actor.action.value}",
            f"actor{i}.x={actor.x:g}",
            f"actor{i}.y={actor.y:g}",
            f"actor{i}.size={actor.size}",
            f"actor{i}.velocity={actor.velocity[0]},{actor.velocity[1]}",
            f"actor{i}.growth={actor.growth}",
        ]
    return "\n".join(lines) + "\n"


def decode_spec(values: Dict[str, Optional[str]]) -> SceneSpec:
    actors = []
    for i in range(int(values["actors"])):
        vx, vy = values[f"actor{i}.velocity"].split(",")
        actors.append(ActorSpec(
            shape=values[f"actor{i}.shape"], color=values[f"actor{i}.color"], action=values[f"actor{i}.action"],
            x=float(values[f"actor{i}.x"]), y=float(values[f"actor{i}.y"]), size=int(values[f"actor{i}.size"]),
            velocity=(int(vx), int(vy)), growth=int(values[f"actor{i}.growth"]),
        ))
    return SceneSpec(height=int(values["height"]), width=int(values["width"]), frames=int(values["frames"]),
                     actors=actors, referent=int(values["referent"]), seed=int(values["seed"]),
                     difficulty=values["difficulty"])


def write_sample(root: PathLike, sample: VideoSample) -> Path:
    sample_dir = Path(root) / sample.sample_id
    try:
        sample_dir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(sample.frames):
            write_ppm(sample_dir / f"frame_{t:02d}.ppm", frame)
        write_pgm(sample_dir / "mask.pgm", sample.mask)
        (sample_dir / "query.txt").write_text(sample.query + "\n", encoding="utf-8")
        (sample_dir / "spec.txt").write_text(encode_spec(sample.spec), encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"cannot write sample: {e}", sample_dir) from e
    return sample_dir


def read_sample(root: PathLike, sample_id: str) -> VideoSample:
    sample_dir = Path(root) / sample_id
    if not sample_dir.is_dir():
        raise DatasetError("sample directory not found", sample_dir)
    try:
        spec = decode_spec(dotenv_values(sample_dir / "spec.txt"))
        query = (sample_dir / "query.txt").read_text(encoding="utf-8").strip()
    except (OSError, KeyError, ValueError) as e:
        raise DatasetError(f"cannot read sample metadata: {e}", sample_dir) from e
    frames = np.stack([read_image(sample_dir / f"frame_{t:02d}.ppm") for t in range(spec.frames)])
    mask = read_mask(sample_dir / "mask.pgm")
    return VideoSample(frames=frames, query=query, mask=mask, spec=spec, sample_id=sample_id)


def write_manifest(root: PathLike, manifest: Manifest) -> Path:
    path = Path(root) / MANIFEST_FILE
    try:
        path.write_text("".join(f"{e.sample_id} {e.split}\n" for e in manifest.entries), encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"cannot write manifest: {e}", path) from e
    return path


def read_manifest(root: PathLike) -> Manifest:
    path = Path(root) / MANIFEST_FILE
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read manifest: {e}", path) from e
    entries = []
    for line in lines:
        if line.strip():
            sample_id, split = line.split()
            entries.append(ManifestEntry(sample_id=sample_id, split=split))
    return Manifest(entries=entries)


def read_vocabulary(root: PathLike) -> Vocabulary:
    return Vocabulary.from_file(Path(root) / VOCAB_FILE)


def write_dataset(
    root: PathLike,
    n_train: int,
    n_test: int,
    seed: int = 0,
    difficulty: Difficulty = Difficulty.easy,
    height: int = 64,
    width: int = 64,
    frames: int = 8,
) -> Manifest:
    """
    Generate n_train + n_test samples from consecutive seeds starting at `seed`.

    A seed whose placement fails is skipped and the next one is tried, so the
    result depends only on the arguments.
    """
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory: {e}", root) from e
    Vocabulary(generator_vocabulary()).to_file(root / VOCAB_FILE)

    manifest = Manifest()
    next_seed = seed
    splits: List[str] = ["train"] * n_train + ["test"] * n_test
    for index, split in enumerate(splits):
        while True:
            try:
                spec = generate_scene(next_seed, difficulty, height, width, frames)
                break
            except GenerationError as e:
                logger.debug("Skipping seed %d: %s", next_seed, e)
            finally:
                next_seed += 1
        sample = sample_from_spec(spec, sample_id=f"sample_{index:05d}")
        write_sample(root, sample)
        manifest.entries.append(ManifestEntry(sample_id=sample.sample_id, split=split))
    write_manifest(root, manifest)
    logger.info("Wrote %d train / %d test samples to %s", n_train, n_test, root)
    return manifest
