"""
Central finite-difference checks of every differentiable operation.

Each check projects the operation's output onto fixed random weights so the
loss is a scalar, back-propagates once, and compares the gradient at every
entry of every input against (f(x + h) - f(x - h)) / 2h. The visual encoder
and assembled model checks sample a few entries per input; their report lines
say so.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from cmam import CrossModalModulation
from errors import UsageError
from lgfs_decoder import ConcatProjection, Decoder, LanguageGuidedSelection, fusion_variant
from models import ExperimentConfig, FusionMode, GradcheckReport, GradcheckResult, Variant
from nn import ParameterStore, make_rng
from segmentation_model import ActorSegmentationModel
from tensor import (
    Tensor,
    avg_pool_spatial,
    avg_pool_words,
    bce_with_logits,
    broadcast_mul,
    concat,
    conv1d,
    conv2d,
    conv3d,
    embedding,
    guarded_normalize,
    linear,
    matmul,
    maximum,
    relu,
    sigmoid,
    softmax,
    stack,
    tanh,
    upsample_bilinear_2x,
)
from text_encoder import GruTextEncoder, Query, WordFeatures, build_embedding
from visual_encoders import SpatialEncoder, StageFeature, TemporalEncoder, target_slice

logger = logging.getLogger(__name__)

STEP = 1e-5
DENOMINATOR_FLOOR = 1e-8
PRIMITIVE_TOLERANCE = 1e-6
COMPOSITE_TOLERANCE = 1e-5
# relu encoders and the assembled model are too large to perturb entry by entry
ENCODER_ENTRIES_PER_INPUT = 16
FULL_MODEL_ENTRIES_PER_INPUT = 4

SUITES = ("tensor-core", "text-encoder", "visual-encoders", "cmam", "lgfs-decoder")


class _Projection:
    """Fixed random weights turning any output into a scalar loss."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.weights: Dict[tuple, np.ndarray] = {}

    def __call__(self, output: Tensor) -> Tensor:
        if output.ndim == 0:
            return output
        if output.shape not in self.weights:
            self.weights[output.shape] = self.rng.standard_normal(output.shape)
        return (output * Tensor(self.weights[output.shape])).sum()


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), DENOMINATOR_FLOOR)


def check_operation(
    suite: str,
    operation: str,
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    tolerance: float,
    rng: np.random.Generator,
    max_entries: Optional[int] = None,
) -> GradcheckResult:
    """
    Compare analytic gradients of `fn` w.r.t. `inputs` with central differences.

    Every entry of every input is perturbed unless `max_entries` caps the count
    per input, in which case a random subset is checked and the result says so.
    `fn` must rebuild its graph from the inputs' current data on every call.
    """
    project = _Projection(rng)
    for tensor in inputs:
        tensor.zero_grad()
    project(fn()).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst, checked, total = 0.0, 0, 0
    for tensor, grad in zip(inputs, analytic):
        flat = tensor.data.reshape(-1)
        grad = grad.reshape(-1)
        total += flat.size
        if max_entries is None or max_entries >= flat.size:
            indices = range(flat.size)
        else:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        for index in indices:
            original = flat[index]
            flat[index] = original + STEP
            plus = project(fn()).item()
            flat[index] = original - STEP
            minus = project(fn()).item()
            flat[index] = original
            numeric = (plus - minus) / (2 * STEP)
            worst = max(worst, relative_error(float(grad[index]), numeric))
            checked += 1
    result = GradcheckResult(suite=suite, operation=operation, worst_relative_error=worst,
                             tolerance=tolerance, checked=checked, total=total)
    logger.debug("%s/%s worst relative error %.3e over %d/%d entries", suite, operation, worst, checked, total)
    return result


def _leaf(rng: np.random.Generator, *shape: int, away_from: Optional[float] = None) -> Tensor:
    data = rng.standard_normal(shape)
    if away_from is not None:
        # keep samples clear of a kink so the finite difference does not straddle it
        data = np.where(np.abs(data - away_from) < 0.1, data + 0.2, data)
    return Tensor(data, requires_grad=True)


def _tensor_core(rng: np.random.Generator) -> List[GradcheckResult]:
    suite, tol = "tensor-core", PRIMITIVE_TOLERANCE
    results = []

    def run(name, fn, *inputs):
        results.append(check_operation(suite, name, fn, inputs, tol, rng))

    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    row = _leaf(rng, 4)
    run("add", lambda: a + row, a, row)
    run("sub", lambda: a - b, a, b)
    run("mul", lambda: a * b, a, b)
    gapped = Tensor(a.data + np.where(rng.random((3, 4)) < 0.5, 0.5, -0.5), requires_grad=True)
    run("maximum", lambda: maximum(a, gapped), a, gapped)
    run("sigmoid", lambda: sigmoid(a), a)
    run("tanh", lambda: tanh(a), a)
    kinked = _leaf(rng, 3, 4, away_from=0.0)
    run("relu", lambda: relu(kinked), kinked)
    run("softmax", lambda: softmax(a, axis=-1), a)
    run("guarded_normalize", lambda: guarded_normalize(a), a)
    run("sum", lambda: a.sum(axis=0), a)
    run("mean", lambda: a.mean(axis=(0, 1)), a)
    run("reshape_transpose", lambda: a.reshape(4, 3).transpose(1, 0), a)
    run("getitem", lambda: a[1:, ::2], a)
    run("concat", lambda: concat([a, b], axis=0), a, b)
    run("stack", lambda: stack([a, b], axis=1), a, b)
    run("two_consumers", lambda: a * a + sigmoid(a), a)

    table = _leaf(rng, 5, 3)
    run("embedding", lambda: embedding(table, [1, 4, 1]), table)
    m1, m2 = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    run("matmul", lambda: matmul(m1, m2), m1, m2)
    x, w, bias = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 3), _leaf(rng, 3)
    run("linear", lambda: linear(x, w, bias), x, w, bias)
    gate = _leaf(rng, 4)
    run("broadcast_mul", lambda: broadcast_mul(x, gate), x, gate)

    seq, k1 = _leaf(rng, 5, 3), _leaf(rng, 3, 3, 2)
    run("conv1d", lambda: conv1d(seq, k1, stride=1, padding=1), seq, k1)
    img, k2 = _leaf(rng, 5, 5, 2), _leaf(rng, 3, 3, 2, 2)
    run("conv2d", lambda: conv2d(img, k2, stride=2, padding=1), img, k2)
    clip, k3 = _leaf(rng, 3, 4, 4, 2), _leaf(rng, 3, 3, 3, 2, 2)
    run("conv3d", lambda: conv3d(clip, k3, stride_thw=(1, 2, 2), padding_thw=1), clip, k3)

    small = _leaf(rng, 2, 3, 2)
    run("upsample_bilinear_2x", lambda: upsample_bilinear_2x(small), small)
    run("avg_pool_spatial", lambda: avg_pool_spatial(small), small)
    run("avg_pool_words", lambda: avg_pool_words(a), a)
    logits = _leaf(rng, 4, 4)
    target = (rng.random((4, 4)) < 0.5).astype(np.float64)
    run("bce_with_logits", lambda: bce_with_logits(logits, target), logits)
    return results


def _text_encoder(rng: np.random.Generator) -> List[GradcheckResult]:
    store = ParameterStore(rng)
    table = build_embedding(store, 6, 3)
    encoder = GruTextEncoder(store, "text.gru", table, hidden=4)
    query = Query(text="a b c", ids=(2, 5, 3))
    return [check_operation("text-encoder", "gru_encode", lambda: encoder.encode(query).L,
                            list(store), COMPOSITE_TOLERANCE, rng)]


def _visual_encoders(rng: np.random.Generator) -> List[GradcheckResult]:
    # five stride-2 stages need 16 x 16 inputs so the last stage still sees 2 x 2
    store = ParameterStore(rng)
    ladder = (2, 2, 2, 2, 2)
    spatial = SpatialEncoder(store, ladder)
    temporal = TemporalEncoder(store, ladder)
    frame = Tensor(rng.random((16, 16, 3)), requires_grad=True)
    clip = Tensor(rng.random((4, 16, 16, 3)), requires_grad=True)
    suite = "visual-encoders"
    return [
        check_operation(suite, "spatial_encoder", lambda: spatial.forward(frame)[-1].tensor,
                        [frame] + store.with_prefix(["spatial_encoder."]), COMPOSITE_TOLERANCE, rng,
                        max_entries=ENCODER_ENTRIES_PER_INPUT),
        check_operation(suite, "temporal_encoder", lambda: target_slice(temporal.forward(clip)[-1]).tensor,
                        [clip] + store.with_prefix(["temporal_encoder."]), COMPOSITE_TOLERANCE, rng,
                        max_entries=ENCODER_ENTRIES_PER_INPUT),
    ]


def _cmam(rng: np.random.Generator) -> List[GradcheckResult]:
    h, w, c_v, c_m, c_l, n = 3, 3, 4, 4, 4, 3
    store = ParameterStore(rng)
    spatial = CrossModalModulation(store, "spatial", 1, c_v, c_l, c_m)
    temporal = CrossModalModulation(store, "temporal", 1, c_v, c_l, c_m)
    V = Tensor(rng.standard_normal((h, w, c_v)), requires_grad=True)
    clip = Tensor(rng.standard_normal((2, h, w, c_v)), requires_grad=True)
    L = Tensor(rng.standard_normal((n, c_l)), requires_grad=True)

    def spatial_fn():
        return spatial.forward_spatial(StageFeature(1, "spatial", V), WordFeatures(L))[0].tensor

    def temporal_fn():
        return temporal.forward_temporal(StageFeature(1, "temporal", clip), WordFeatures(L))[0].tensor

    return [
        check_operation("cmam", "cmam_spatial", spatial_fn,
                        [V, L] + store.with_prefix(["cmam.spatial."]), COMPOSITE_TOLERANCE, rng),
        check_operation("cmam", "cmam_temporal", temporal_fn,
                        [clip, L] + store.with_prefix(["cmam.temporal."]), COMPOSITE_TOLERANCE, rng),
    ]


def _lgfs_decoder(rng: np.random.Generator) -> List[GradcheckResult]:
    suite, tol = "lgfs-decoder", COMPOSITE_TOLERANCE
    store = ParameterStore(rng)
    c_l, c_v = 3, 2
    selection = LanguageGuidedSelection(store, 1, c_l, c_v)
    sentence = _leaf(rng, c_l)
    v_s, v_t = _leaf(rng, 4, 4, c_v), _leaf(rng, 4, 4, c_v)
    results = [check_operation(suite, "lgfs_fuse",
                               lambda: fusion_variant(FusionMode.lgfs, v_s, v_t, sentence, selection),
                               [v_s, v_t, sentence] + store.with_prefix(["lgfs."]), tol, rng)]

    v_gap = Tensor(v_s.data + np.where(rng.random(v_s.shape) < 0.5, 0.5, -0.5), requires_grad=True)
    results.append(check_operation(suite, "max_fuse", lambda: fusion_variant(FusionMode.max, v_s, v_gap),
                                   [v_s, v_gap], tol, rng))

    projection = ConcatProjection(store, "concat.stage1", c_v, c_l)
    results.append(check_operation(suite, "concat_projection", lambda: projection(v_s, sentence),
                                   [v_s, sentence] + store.with_prefix(["concat."]), tol, rng))

    ladder = (2, 2, 2)
    decoder = Decoder(store, ladder)
    fused = [_leaf(rng, 2, 2, 2), _leaf(rng, 4, 4, 2), _leaf(rng, 8, 8, 2)]
    results.append(check_operation(suite, "decode", lambda: decoder.decode(fused).logits,
                                   fused + store.with_prefix(["decoder."]), tol, rng))

    config = ExperimentConfig(variant=Variant.full, frames=2, height=8, width=8, ladder=(2, 2, 2),
                              c_l=3, embed_dim=3, cm_min=2, seed=int(rng.integers(1 << 31)))
    model = ActorSegmentationModel(config, vocab_size=6)
    clip = rng.random((2, 8, 8, 3))
    query = Query(text="a b", ids=(2, 4))
    results.append(check_operation(suite, "full_model", lambda: model.forward(clip, query).logits,
                                   list(model.store), tol, rng,
                                   max_entries=FULL_MODEL_ENTRIES_PER_INPUT))
    return results


_RUNNERS = {
    "tensor-core": _tensor_core,
    "text-encoder": _text_encoder,
    "visual-encoders": _visual_encoders,
    "cmam": _cmam,
    "lgfs-decoder": _lgfs_decoder,
}


def run_gradcheck(selector: str = "all", seed: int = 0) -> GradcheckReport:
    """Run one suite (or "all") with a fixed seed."""
    if selector == "all":
        suites = SUITES
    elif selector in _RUNNERS:
        suites = (selector,)
    else:
        raise UsageError(f"unknown gradcheck suite '{selector}', expected one of: all, {', '.join(SUITES)}")
    results = []
    for suite in suites:
        results += _RUNNERS[suite](make_rng(seed))
    return GradcheckReport(seed=seed, results=results)


def render_report(report: GradcheckReport) -> str:
    width = max(len(f"{r.suite}/{r.operation}") for r in report.results)
    lines = []
    for r in report.results:
        status = "ok" if r.passed else "FAIL"
        coverage = f"sampled {r.checked} of {r.total} entries" if r.sampled else f"all {r.checked} entries"
        lines.append(f"{(r.suite + '/' + r.operation).ljust(width)}  {r.worst_relative_error:.3e}  "
                     f"(tol {r.tolerance:.0e}, {coverage})  {status}")
    failed = sum(1 for r in report.results if not r.passed)
    lines.append(f"{len(report.results) - failed}/{len(report.results)} operations passed (seed {report.seed})")
    return "\n".join(lines)
