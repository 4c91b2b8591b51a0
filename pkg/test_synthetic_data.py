import numpy as np
import pytest

from dataset_store import (
    decode_spec,
    encode_spec,
    read_manifest,
    read_image,
    read_mask,
    read_sample,
    read_vocabulary,
    write_dataset,
    write_pgm,
    write_ppm,
)
from dotenv import dotenv_values
from errors import DataValidationError, DatasetError
from metrics import iou
from models import Action, ActorSpec, Color, Difficulty, SceneSpec, Shape
from synthetic_data import (
    actor_mask,
    boxes_separated,
    describe,
    generate_sample,
    generate_scene,
    generator_vocabulary,
    parse_query,
    rasterize,
    sample_from_spec,
)
from text_encoder import UNK_ID, Vocabulary, tokenize


def test_same_seed_is_byte_identical():
    a = generate_sample(17, Difficulty.ambiguous)
    b = generate_sample(17, Difficulty.ambiguous)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert a.query == b.query


def test_different_seeds_differ():
    assert generate_sample(1).frames.tobytes() != generate_sample(2).frames.tobytes()


def test_sample_shapes_and_dtypes():
    sample = generate_sample(3, height=32, width=32, frames=4)
    assert sample.frames.shape == (4, 32, 32, 3) and sample.frames.dtype == np.uint8
    assert sample.mask.shape == (32, 32)
    assert set(np.unique(sample.mask)) <= {0, 1}
    assert sample.mask.any()


@pytest.mark.parametrize("seed", range(10))
def test_ambiguous_scene_has_both_distractors(seed):
    spec = generate_scene(seed, Difficulty.ambiguous)
    ref = spec.actors[spec.referent]
    others = [a for i, a in enumerate(spec.actors) if i != spec.referent]
    assert any(a.appearance == ref.appearance and a.action != ref.action for a in others)
    assert any(a.action == ref.action and a.appearance != ref.appearance for a in others)


@pytest.mark.parametrize("seed", range(10))
def test_actors_stay_inside_and_apart(seed):
    spec = generate_scene(seed, Difficulty.ambiguous)
    for t in range(spec.frames):
        for actor in spec.actors:
            assert actor_mask(actor, t, spec.height, spec.width).any()
    for i, a in enumerate(spec.actors):
        for b in spec.actors[i + 1:]:
            assert boxes_separated(a, b, spec.frames)


def test_query_uses_generator_vocabulary():
    sample = generate_sample(5, Difficulty.ambiguous)
    assert UNK_ID not in tokenize(sample.query, Vocabulary(generator_vocabulary())).ids


def test_query_parses_back_to_referent():
    spec = generate_scene(8, Difficulty.ambiguous)
    ref = spec.actors[spec.referent]
    assert parse_query(describe(ref)) == (ref.color, ref.shape, ref.action)


def test_bad_query():
    with pytest.raises(DataValidationError):
        parse_query("red square moving left")


def test_centroid_follows_velocity():
    actor = ActorSpec(shape=Shape.square, color=Color.red, action=Action.moving_right,
                      x=20.0, y=30.0, size=8, velocity=(2, 0))
    start = np.argwhere(actor_mask(actor, 0, 64, 64)).mean(axis=0)
    for t in range(1, 6):
        centroid = np.argwhere(actor_mask(actor, t, 64, 64)).mean(axis=0)
        np.testing.assert_allclose(centroid - start, [0.0, 2.0 * t])


def _centroid(mask):
    return np.argwhere(mask).mean(axis=0)[::-1]  # (x, y)


@pytest.mark.parametrize("seed", range(10))
def test_generated_motion_matches_action_label(seed):
    spec = generate_scene(seed, Difficulty.ambiguous)
    for actor in spec.actors:
        masks = [actor_mask(actor, t, spec.height, spec.width) for t in range(spec.frames)]
        start = _centroid(masks[0])
        areas = [int(m.sum()) for m in masks]
        if actor.velocity != (0, 0):
            for t in range(1, spec.frames):
                np.testing.assert_allclose(_centroid(masks[t]) - start, np.asarray(actor.velocity) * t, atol=1e-9)
        last = _centroid(masks[-1]) - start
        if actor.action == Action.moving_left:
            assert last[0] < 0 and last[1] == 0
        elif actor.action == Action.moving_right:
            assert last[0] > 0 and last[1] == 0
        elif actor.action == Action.moving_up:
            assert last[1] < 0 and last[0] == 0
        elif actor.action == Action.moving_down:
            assert last[1] > 0 and last[0] == 0
        elif actor.action == Action.growing:
            assert areas == sorted(areas) and areas[-1] > areas[0]
        elif actor.action == Action.shrinking:
            assert areas == sorted(areas, reverse=True) and areas[-1] < areas[0]
        else:
            assert areas == [areas[0]] * spec.frames
            np.testing.assert_array_equal(last, [0.0, 0.0])


def test_referent_moving_left_by_two_pixels_per_frame():
    actor = ActorSpec(shape=Shape.square, color=Color.red, action=Action.moving_left,
                      x=40.0, y=30.0, size=8, velocity=(-2, 0))
    sample = sample_from_spec(SceneSpec(actors=[actor], referent=0, seed=0))
    assert sample.query == "red square is moving left"
    first = _centroid(actor_mask(actor, 0, 64, 64))
    target = _centroid(sample.mask)
    assert abs((first[0] - target[0]) - 2 * (8 // 2)) <= 0.5
    assert abs(first[1] - target[1]) <= 0.5


@pytest.mark.parametrize("seed", range(10))
def test_appearance_twin_never_overlaps_referent(seed):
    spec = generate_scene(seed, Difficulty.ambiguous)
    ref = spec.actors[spec.referent]
    twins = [a for i, a in enumerate(spec.actors)
             if i != spec.referent and a.appearance == ref.appearance and a.action != ref.action]
    assert twins
    for t in range(spec.frames):
        ref_mask = actor_mask(ref, t, spec.height, spec.width).astype(np.uint8)
        for twin in twins:
            assert iou(actor_mask(twin, t, spec.height, spec.width).astype(np.uint8), ref_mask) == 0.0



def test_growing_actor_gets_bigger():
    actor = ActorSpec(shape=Shape.circle, color=Color.blue, action=Action.growing,
                      x=32.0, y=32.0, size=8, growth=1)
    areas = [actor_mask(actor, t, 64, 64).sum() for t in range(6)]
    assert areas == sorted(areas) and areas[-1] > areas[0]


def test_square_area():
    assert rasterize(Shape.square, 8.0, 8.0, 4, 16, 16).sum() == 16


def test_mask_is_referent_at_target_frame():
    sample = generate_sample(9)
    spec = sample.spec
    expected = actor_mask(spec.actors[spec.referent], spec.target_frame, spec.height, spec.width)
    assert np.array_equal(sample.mask, expected.astype(np.uint8))


def test_invalid_ambiguous_spec_rejected():
    actor = ActorSpec(shape=Shape.circle, color=Color.red, action=Action.still, x=10, y=10, size=6)
    with pytest.raises(ValueError):
        SceneSpec(actors=[actor], referent=0, seed=0, difficulty=Difficulty.ambiguous)


# =============================================================================
# On-disk format
# =============================================================================

def test_ppm_header_and_round_trip(tmp_path):
    image = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    write_ppm(tmp_path / "f.ppm", image)
    assert (tmp_path / "f.ppm").read_bytes().startswith(b"P6\n64 64\n255\n")
    assert np.array_equal(read_image(tmp_path / "f.ppm"), image)


def test_pgm_mask_uses_0_and_255(tmp_path):
    mask = np.zeros((4, 6), dtype=np.uint8)
    mask[1:3, 2:5] = 1
    write_pgm(tmp_path / "m.pgm", mask)
    raw = read_image(tmp_path / "m.pgm")
    assert set(np.unique(raw)) == {0, 255}
    assert np.array_equal(read_mask(tmp_path / "m.pgm"), mask)


def test_spec_text_decodes_to_same_scene(tmp_path):
    spec = generate_scene(4, Difficulty.ambiguous)
    path = tmp_path / "spec.txt"
    path.write_text(encode_spec(spec), encoding="utf-8")
    assert decode_spec(dotenv_values(path)) == spec


def test_write_dataset(tmp_path):
    manifest = write_dataset(tmp_path / "data", n_train=3, n_test=2, seed=10, height=32, width=32, frames=4)
    assert manifest.ids("train") == ["sample_00000", "sample_00001", "sample_00002"]
    assert len(manifest.ids("test")) == 2
    assert read_manifest(tmp_path / "data") == manifest
    assert read_vocabulary(tmp_path / "data").lookup("red") == 2

    sample = read_sample(tmp_path / "data", "sample_00003")
    assert sample.frames.shape == (4, 32, 32, 3)
    regenerated = generate_sample(sample.spec.seed, height=32, width=32, frames=4)
    assert np.array_equal(sample.frames, regenerated.frames)
    assert np.array_equal(sample.mask, regenerated.mask)
    assert sample.query == regenerated.query


def test_write_dataset_is_reproducible(tmp_path):
    write_dataset(tmp_path / "a", 2, 1, seed=3, height=32, width=32, frames=4)
    write_dataset(tmp_path / "b", 2, 1, seed=3, height=32, width=32, frames=4)
    for name in ("sample_00000", "sample_00002"):
        for f in ("frame_00.ppm", "mask.pgm", "query.txt", "spec.txt"):
            assert (tmp_path / "a" / name / f).read_bytes() == (tmp_path / "b" / name / f).read_bytes()


def test_missing_sample(tmp_path):
    with pytest.raises(DatasetError):
        read_sample(tmp_path, "nope")


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        read_manifest(tmp_path)
