import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import DataValidationError, DimensionError, UsageError
from gradcheck import run_gradcheck
from nn import ParameterStore, make_rng
from tensor import Tensor
from visual_encoders import (
    DEFAULT_LADDER,
    SpatialEncoder,
    StageFeature,
    TemporalEncoder,
    coordinate_feature,
    target_index,
    target_slice,
)


def test_coordinate_corner():
    assert_allclose(coordinate_feature(2, 2).data[0, 0], [-1, -1, -1, -1, -1, -1, 0.5, 0.5])


def test_coordinate_center_of_odd_grid():
    assert_allclose(coordinate_feature(5, 5).data[2, 2, :6], 0.0, atol=1e-15)


def test_coordinate_formula():
    c = coordinate_feature(4, 4).data[1, 2]
    assert_allclose(c[0], 1 / 3)
    assert_allclose(c[1], -1 / 3)


def test_coordinate_origin_survives_even_sampling():
    fine = coordinate_feature(8, 8).data[::2, ::2]
    coarse = coordinate_feature(4, 4).data
    assert fine[0, 0, :6].tolist() == coarse[0, 0, :6].tolist()
    assert fine[..., :6].min() >= -1.0 and fine[..., :6].max() <= 1.0


def test_coordinate_too_small():
    with pytest.raises(DataValidationError):
        coordinate_feature(1, 4)


def test_spatial_stage_shapes():
    encoder = SpatialEncoder(ParameterStore(make_rng(0)))
    assert encoder.stage(1, Tensor(np.zeros((64, 64, 3)))).shape == (64, 64, 16)
    assert encoder.stage(3, Tensor(np.zeros((32, 32, 32)))).shape == (16, 16, 64)


def test_temporal_stage_shapes():
    encoder = TemporalEncoder(ParameterStore(make_rng(0)), ladder=(4, 4))
    assert encoder.stage(1, Tensor(np.zeros((8, 16, 16, 3)))).shape == (8, 16, 16, 4)


def test_temporal_stage_one_at_full_size():
    encoder = TemporalEncoder(ParameterStore(make_rng(0)))
    assert encoder.ladder == DEFAULT_LADDER
    assert encoder.stage(1, Tensor(np.zeros((8, 64, 64, 3)))).shape == (8, 64, 64, 16)


def test_both_encoders_share_ladder_and_resolutions():
    store = ParameterStore(make_rng(0))
    rng = make_rng(1)
    clip = rng.random((2, 32, 32, 3))
    spatial = SpatialEncoder(store).forward(Tensor(clip[1]))
    temporal = TemporalEncoder(store).forward(Tensor(clip))
    assert len(spatial) == len(temporal) == 5
    for i, (s, t) in enumerate(zip(spatial, temporal), start=1):
        assert s.shape == (32 >> (i - 1), 32 >> (i - 1), DEFAULT_LADDER[i - 1])
        assert t.shape == (2,) + s.shape


def test_zero_weights_give_zero_output():
    store = ParameterStore(make_rng(0))
    encoder = SpatialEncoder(store, ladder=(2, 2))
    for p in store:
        p.data[...] = 0.0
    for feature in encoder.forward(Tensor(np.zeros((8, 8, 3)))):
        assert np.all(feature.tensor.data == 0.0)


def test_channel_mismatch():
    encoder = SpatialEncoder(ParameterStore(make_rng(0)), ladder=(2, 2))
    with pytest.raises(DimensionError):
        encoder.stage(2, Tensor(np.zeros((8, 8, 5))))


def test_hook_output_feeds_next_stage():
    encoder = SpatialEncoder(ParameterStore(make_rng(0)), ladder=(2, 2))
    seen = []

    def zero_first_stage(feature):
        seen.append(feature.stage)
        if feature.stage == 1:
            return StageFeature(1, feature.kind, Tensor(np.zeros(feature.shape)))
        return feature

    hooked = encoder.forward(Tensor(make_rng(1).random((8, 8, 3))), zero_first_stage)
    assert seen == [1, 2]
    assert_allclose(hooked[1].tensor.data, encoder.stage(2, Tensor(np.zeros((8, 8, 2)))).tensor.data)


def test_target_index():
    assert target_index(8) == 4
    assert target_index(2) == 1


def test_target_slice_of_constant_clip():
    frame = make_rng(0).random((4, 4, 2))
    clip = Tensor(np.stack([frame] * 8))
    sliced = target_slice(StageFeature(1, "temporal", clip))
    assert sliced.kind == "spatial"
    assert_allclose(sliced.tensor.data, frame)


def test_target_slice_rejects_spatial():
    with pytest.raises(UsageError):
        target_slice(StageFeature(1, "spatial", Tensor(np.zeros((2, 2, 1)))))


def test_encoder_gradients():
    assert run_gradcheck("visual-encoders", seed=0).passed
