import numpy as np
import pytest
from numpy.testing import assert_allclose

from cmam import CrossModalModulation, adaptive_sentence, dump_attention
from errors import DataValidationError, UsageError
from gradcheck import run_gradcheck
from nn import ParameterStore, make_rng
from tensor import Tensor, guarded_normalize, softmax
from text_encoder import WordFeatures
from visual_encoders import SpatialEncoder, StageFeature


def _cmam(c_v=4, c_l=4, c_m=4, seed=0, branch="spatial", stage=1):
    return CrossModalModulation(ParameterStore(make_rng(seed)), branch, stage, c_v, c_l, c_m)


def _zero(module):
    for p in (module.visual_proj, module.word_proj, module.linear_weight, module.linear_bias):
        p.data[...] = 0.0


@pytest.fixture
def rng():
    return make_rng(11)


# =============================================================================
# Word relevance
# =============================================================================

def test_hand_computed_two_word_case():
    module = _cmam(c_v=1, c_l=1, c_m=1)
    module.visual_proj.data[...] = 1.0
    module.word_proj.data[...] = 1.0
    V = Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1))
    L = Tensor(np.array([[1.0], [2.0]]))
    diag = module.word_relevance(V, L)
    assert_allclose(diag.A.data, [[1.0, 3.0], [2.0, 6.0]])
    assert_allclose(diag.omega.data, [4.0, 8.0])
    assert_allclose(diag.omega_tilde.data, [0.3900, 0.6100], atol=1e-3)


def test_single_word_gets_all_weight(rng):
    module = _cmam()
    diag = module.word_relevance(Tensor(rng.standard_normal((3, 3, 4))), Tensor(rng.standard_normal((1, 4))))
    assert diag.omega_tilde.data.tolist() == [1.0]


def test_zero_visual_input_gives_uniform_weights(rng):
    module = _cmam()
    diag = module.word_relevance(Tensor(np.zeros((3, 3, 4))), Tensor(rng.standard_normal((4, 4))))
    assert_allclose(diag.omega.data, 0.0)
    assert_allclose(diag.omega_tilde.data, 0.25, atol=1e-15)


def test_weights_sum_to_one_and_omega_is_row_sum(rng):
    module = _cmam(seed=3)
    diag = module.word_relevance(Tensor(rng.standard_normal((3, 3, 4))), Tensor(rng.standard_normal((5, 4))))
    assert abs(diag.omega_tilde.data.sum() - 1.0) < 1e-9
    assert np.all((diag.omega_tilde.data > 0) & (diag.omega_tilde.data <= 1))
    assert_allclose(diag.omega.data, diag.A.data.sum(axis=1), atol=1e-12)


def test_normalised_weights_are_scale_invariant(rng):
    omega = rng.standard_normal(6)
    base = softmax(guarded_normalize(Tensor(omega))).data
    for c in (1e-3, 2.0, 1e4):
        assert_allclose(softmax(guarded_normalize(Tensor(c * omega))).data, base, atol=1e-9)


# =============================================================================
# Adaptive sentence
# =============================================================================

def test_uniform_weights_give_mean(rng):
    L = Tensor(rng.standard_normal((4, 3)))
    assert_allclose(adaptive_sentence(L, Tensor(np.full(4, 0.25))).data, L.data.mean(axis=0), atol=1e-12)


def test_one_hot_weights_pick_a_row(rng):
    L = Tensor(rng.standard_normal((3, 2)))
    assert_allclose(adaptive_sentence(L, Tensor([0.0, 1.0, 0.0])).data, L.data[1])


def test_weighted_sum_oracle():
    out = adaptive_sentence(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([0.39, 0.61])).data
    assert_allclose(out, [0.39, 0.61])


def test_weights_must_sum_to_one():
    with pytest.raises(DataValidationError):
        adaptive_sentence(Tensor([[1.0], [2.0]]), Tensor([0.5, 0.6]))


# =============================================================================
# Modulation
# =============================================================================

def test_zero_linear_scales_by_one_and_a_half(rng):
    module = _cmam()
    _zero(module)
    V = rng.standard_normal((3, 3, 4))
    out = module.modulate(Tensor(V), Tensor(rng.standard_normal(4))).data
    assert np.array_equal(out, 1.5 * V)


def test_zero_visual_input_stays_zero(rng):
    module = _cmam()
    assert np.all(module.modulate(Tensor(np.zeros((2, 2, 4))), Tensor(rng.standard_normal(4))).data == 0.0)


def test_saturated_gate_doubles(rng):
    module = _cmam()
    module.linear_weight.data[...] = 0.0
    module.linear_bias.data[...] = 50.0
    V = rng.standard_normal((2, 2, 4))
    assert_allclose(module.modulate(Tensor(V), Tensor(rng.standard_normal(4))).data, 2 * V, atol=1e-9)


def test_modulation_is_channel_local(rng):
    module = _cmam(seed=5)
    V = Tensor(rng.standard_normal((2, 2, 4)))
    sentence = rng.standard_normal(4)
    module.linear_weight.data[...] = 0.0
    module.linear_weight.data[0, 2] = 1.0
    before = module.modulate(V, Tensor(sentence)).data
    sentence[0] += 1.0
    after = module.modulate(V, Tensor(sentence)).data
    changed = np.any(before != after, axis=(0, 1))
    assert changed.tolist() == [False, False, True, False]


def test_output_between_v_and_two_v_for_positive_input(rng):
    module = _cmam(seed=6)
    V = np.abs(rng.standard_normal((3, 3, 4)))
    out = module.modulate(Tensor(V), Tensor(rng.standard_normal(4))).data
    assert np.all(out >= V) and np.all(out <= 2 * V)


# =============================================================================
# Spatial and temporal application
# =============================================================================

def test_shapes_preserved(rng):
    words = WordFeatures(Tensor(rng.standard_normal((3, 4))))
    spatial = _cmam(branch="spatial")
    temporal = _cmam(branch="temporal")
    out, diags = spatial.forward_spatial(StageFeature(1, "spatial", Tensor(rng.standard_normal((3, 3, 4)))), words)
    assert out.shape == (3, 3, 4) and len(diags) == 1
    out, diags = temporal.forward_temporal(StageFeature(1, "temporal", Tensor(rng.standard_normal((4, 3, 3, 4)))), words)
    assert out.shape == (4, 3, 3, 4) and len(diags) == 4


def test_identical_frames_give_identical_outputs(rng):
    frame = rng.standard_normal((3, 3, 4))
    clip = Tensor(np.stack([frame] * 4))
    out, _ = _cmam(branch="temporal").forward_temporal(
        StageFeature(1, "temporal", clip), WordFeatures(Tensor(rng.standard_normal((2, 4)))))
    for t in range(1, 4):
        assert np.array_equal(out.tensor.data[t], out.tensor.data[0])


def test_kind_and_stage_mismatch(rng):
    words = WordFeatures(Tensor(rng.standard_normal((2, 4))))
    module = _cmam(stage=2)
    with pytest.raises(UsageError):
        module.forward_spatial(StageFeature(1, "spatial", Tensor(np.zeros((2, 2, 4)))), words)
    with pytest.raises(UsageError):
        module.forward_spatial(StageFeature(2, "temporal", Tensor(np.zeros((1, 2, 2, 4)))), words)


def test_zero_cmam_in_encoder_scales_each_stage(rng):
    store = ParameterStore(make_rng(2))
    encoder = SpatialEncoder(store, ladder=(4, 4))
    words = WordFeatures(Tensor(rng.standard_normal((3, 4))))
    modules = {s: CrossModalModulation(store, "spatial", s, 4, 4, 4) for s in (1, 2)}
    for module in modules.values():
        _zero(module)

    def with_cmam(feature):
        return modules[feature.stage].forward_spatial(feature, words)[0]

    def scaled(feature):
        return StageFeature(feature.stage, feature.kind, feature.tensor * 1.5)

    frame = Tensor(rng.random((8, 8, 3)))
    for a, b in zip(encoder.forward(frame, with_cmam), encoder.forward(frame, scaled)):
        assert_allclose(a.tensor.data, b.tensor.data, rtol=1e-14)


def test_attention_dump(tmp_path, rng):
    module = _cmam()
    diag = module.word_relevance(Tensor(rng.standard_normal((3, 3, 4))), Tensor(rng.standard_normal((2, 4))))
    paths = dump_attention(diag, 3, 3, ["red", "circle"], tmp_path)
    assert [p.name for p in paths] == ["attention_00_red.pgm", "attention_01_circle.pgm"]
    assert paths[0].read_bytes().startswith(b"P5")


def test_cmam_gradients():
    assert run_gradcheck("cmam", seed=0).passed
