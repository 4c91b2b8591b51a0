"""
Multiply-accumulate counts for one forward pass.

The analytic count comes from shape arithmetic alone; `tally_macs` runs the real
model on a blank clip under `count_macs()` so the two can be compared op for op.
Only convolutions, linears and matmuls are counted.
"""

import logging
from typing import Dict, List, Tuple

import numpy as np

from models import ExperimentConfig, FlopsReport, FusionMode
from segmentation_model import ActorSegmentationModel
from tensor import count_macs
from text_encoder import Query
from visual_encoders import COORD_CHANNELS

logger = logging.getLogger(__name__)

DEFAULT_QUERY_WORDS = 5  # "<color> <shape> is moving <direction>"


def conv_macs(out_positions: int, kernel_volume: int, c_in: int, c_out: int) -> int:
    return out_positions * kernel_volume * c_in * c_out


def stage_resolutions(config: ExperimentConfig) -> List[Tuple[int, int]]:
    """Output H x W of every encoder stage; stage 1 keeps the input size, later stages halve it."""
    return [(config.height >> (i - 1), config.width >> (i - 1)) for i in range(1, config.num_stages + 1)]


def _encoder(config: ExperimentConfig, frames: int, kernel_volume: int) -> Tuple[int, int]:
    total = 0
    c_in = 3
    for (h, w), c_out in zip(stage_resolutions(config), config.ladder):
        positions = frames * h * w
        total += conv_macs(positions, kernel_volume, c_in + COORD_CHANNELS, c_out)
        total += conv_macs(positions, kernel_volume, c_out, c_out)
        c_in = c_out
    return total, total


def _text(config: ExperimentConfig, n_words: int) -> int:
    return 3 * n_words * (config.embed_dim * config.c_l + config.c_l * config.c_l)


def _cmam(config: ExperimentConfig, frames: int, n_words: int) -> Tuple[int, int]:
    total = conv = 0
    resolutions = stage_resolutions(config)
    for stage in config.cmam_stages:
        h, w = resolutions[stage - 1]
        c_v = config.ladder[stage - 1]
        c_m = config.c_m(c_v)
        visual = conv_macs(h * w, 1, c_v, c_m)
        per_frame = (visual
                     + conv_macs(n_words, 1, config.c_l, c_m)
                     + n_words * c_m * h * w
                     + n_words * config.c_l
                     + config.c_l * c_v)
        total += frames * per_frame
        conv += frames * visual
    return total, conv


def _decoder(config: ExperimentConfig, branches: Tuple[str, ...], fusion) -> Tuple[int, int]:
    total = conv = 0
    resolutions = stage_resolutions(config)
    for stage in range(1, config.num_stages + 1):
        h, w = resolutions[stage - 1]
        c_v = config.ladder[stage - 1]
        if stage not in config.cmam_stages:
            projection = len(branches) * conv_macs(h * w, 1, c_v + config.c_l, c_v)
            total += projection
            conv += projection
        if fusion == FusionMode.lgfs:
            total += 2 * config.c_l * c_v
    for stage in range(1, config.num_stages):
        h, w = resolutions[stage]
        projection = conv_macs(h * w, 1, config.ladder[stage], config.ladder[stage - 1])
        total += projection
        conv += projection
    head = conv_macs(config.height * config.width, 1, config.ladder[0], 1)
    return total + head, conv + head


def analytic_macs(config: ExperimentConfig, n_words: int = DEFAULT_QUERY_WORDS) -> Tuple[Dict[str, int], int]:
    """Per-component MACs and the visual-convolution subtotal."""
    branches = config.branches
    fusion = config.effective_fusion
    components: Dict[str, int] = {}
    conv_total = 0
    for branch in branches:
        frames, volume = (1, 9) if branch == "spatial" else (config.frames, 27)
        components[f"{branch}_encoder"], encoder_conv = _encoder(config, frames, volume)
        components[f"text_{branch}"] = _text(config, n_words)
        cmam_total, cmam_conv = _cmam(config, frames, n_words)
        if cmam_total:
            components[f"cmam_{branch}"] = cmam_total
        conv_total += encoder_conv + cmam_conv
    components["decoder"], decoder_conv = _decoder(config, branches, fusion)
    return components, conv_total + decoder_conv


def tally_macs(config: ExperimentConfig, n_words: int = DEFAULT_QUERY_WORDS) -> Tuple[Dict[str, int], int]:
    model = ActorSegmentationModel(config, vocab_size=n_words + 2)
    clip = np.zeros((config.frames, config.height, config.width, 3))
    query = Query(text=" ".join(["word"] * n_words), ids=tuple(range(2, n_words + 2)))
    with count_macs() as tally:
        model.forward(clip, query)
    conv_total = sum(macs for _, op, macs in tally.entries if op in ("conv2d", "conv3d"))
    return tally.by_scope(), conv_total


def flops(config: ExperimentConfig, n_words: int = DEFAULT_QUERY_WORDS, verify: bool = True) -> FlopsReport:
    components, conv_total = analytic_macs(config, n_words)
    total = sum(components.values())
    tallied = None
    if verify:
        tallied, tallied_conv = tally_macs(config, n_words)
        if tallied_conv != conv_total:
            logger.warning("Tallied convolution MACs %d differ from analytic %d", tallied_conv, conv_total)
    spatial = components.get("spatial_encoder", 0)
    return FlopsReport(by_component=components, total_macs=total, conv_macs=conv_total,
                       spatial_branch_share=100.0 * spatial / total, tallied_macs=tallied)


def render_flops(report: FlopsReport) -> str:
    width = max(len(name) for name in report.by_component)
    lines = [f"{name.ljust(width)}  {macs:>14,d}  {100.0 * macs / report.total_macs:5.1f}%"
             for name, macs in report.by_component.items()]
    lines.append(f"{'total'.ljust(width)}  {report.total_macs:>14,d}")
    lines.append(f"visual convolutions: {report.conv_macs:,d} MACs")
    lines.append(f"spatial encoder share: {report.spatial_branch_share:.1f}% (full-scale reference: 9.2%)")
    if report.verified is not None:
        lines.append("per-op tally: " + ("matches" if report.verified else "MISMATCH"))
    return "\n".join(lines)
