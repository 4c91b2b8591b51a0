"""
Ablation grids: every cell trains and evaluates one configuration over several
seeds on a shared dataset, and cells are compared by their per-seed medians.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from errors import ConfigError
from models import ExperimentConfig
from training_service import TrainingService

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)
TIE_TOLERANCE = 0.01
METRIC_COLUMNS = ["P@0.5", "P@0.6", "P@0.7", "P@0.8", "P@0.9", "AP", "Overall", "Mean"]

Level = Union[str, Tuple[str, ...]]


@dataclass
class AblationCell:
    name: str
    overrides: Dict[str, Any] = field(default_factory=dict)


def parse_cell(text: str) -> AblationCell:
    """
    Parse "variant[:fusion][@stage,stage,...]", e.g. "both_concat:max" or "full@4,5".
    """
    body, _, stages = text.partition("@")
    variant, _, fusion = body.partition(":")
    overrides: Dict[str, Any] = {"variant": variant, "fusion": fusion or None}
    if stages:
        try:
            overrides["cmam_stages"] = tuple(int(s) for s in stages.split(","))
        except ValueError as e:
            raise ConfigError(f"bad CMAM stage list in ablation cell '{text}'") from e
    return AblationCell(name=text, overrides=overrides)


GRIDS: Dict[str, List[AblationCell]] = {
    "components": [parse_cell(c) for c in ("spatial_only", "temporal_only", "both_concat", "both_lgfs", "full")],
    # fusion methods compared without CMAM
    "fusion": [AblationCell("add", {"variant": "both_concat", "fusion": "add"}),
               AblationCell("max", {"variant": "both_concat", "fusion": "max"}),
               AblationCell("lgfs", {"variant": "both_lgfs"})],
    "cmam": [AblationCell("{" + ",".join(f"I{s}" for s in sorted(stages, reverse=True)) + "}",
                          {"variant": "full", "cmam_stages": stages})
             for stages in ((5,), (4, 5), (3, 4, 5), (2, 3, 4, 5), (1, 2, 3, 4, 5))],
}

# Expected median ordering per named grid, best first. A tuple level is scored by its best cell.
ORDERINGS: Dict[str, List[Level]] = {
    "components": ["full", "both_lgfs", "both_concat", ("spatial_only", "temporal_only")],
    "fusion": ["lgfs", "add"],
}


def resolve_grid(grid: Union[str, Sequence[str]]) -> List[AblationCell]:
    if isinstance(grid, str):
        if grid in GRIDS:
            return GRIDS[grid]
        grid = [g for g in grid.split() if g]
    if not grid:
        raise ConfigError("ablation grid is empty")
    return [parse_cell(g) for g in grid]


def cell_config(base: ExperimentConfig, cell: AblationCell, seed: int) -> ExperimentConfig:
    values = base.model_dump(exclude={"fusion", "cmam_stages"})
    values.update(cell.overrides)
    values["seed"] = seed
    values["run_dir"] = str(Path(base.run_dir) / "ablation" / cell.name.replace("@", "_at_") / f"seed{seed}")
    return ExperimentConfig(**values)


def _row(cell: str, seed: int, report) -> Dict[str, Any]:
    row = {"cell": cell, "seed": seed}
    row.update({f"P@{k}": v for k, v in report.precision_at.items()})
    row.update({"AP": report.ap, "Overall": report.overall_iou, "Mean": report.mean_iou})
    return row


class AblationService:
    def __init__(self, base: ExperimentConfig, data_dir: Optional[Union[str, Path]] = None,
                 seeds: Sequence[int] = DEFAULT_SEEDS, split: str = "test"):
        if len(seeds) < 1:
            raise ConfigError("ablation needs at least one seed")
        self.base = base
        self.data_dir = data_dir
        self.seeds = tuple(seeds)
        self.split = split

    def run(self, grid: Union[str, Sequence[str]]) -> pd.DataFrame:
        """Per-seed results, one row per (cell, seed)."""
        rows = []
        for cell in resolve_grid(grid):
            for seed in self.seeds:
                config = cell_config(self.base, cell, seed)
                log = TrainingService(config, self.data_dir).train()
                report = log.reports.get(self.split)
                if report is None:
                    raise ConfigError(f"split '{self.split}' was not evaluated; is it empty?")
                logger.info("Cell %s seed %d: mean IoU %.4f", cell.name, seed, report.mean_iou)
                rows.append(_row(cell.name, seed, report))
        return pd.DataFrame(rows)


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """Median over seeds per cell, cells kept in grid order."""
    columns = [c for c in METRIC_COLUMNS if c in results.columns]
    return results.groupby("cell", sort=False)[columns].median()


def render_ablation(summary: pd.DataFrame, title: str = "") -> str:
    table = (summary * 100).to_string(float_format=lambda v: f"{v:.1f}")
    return f"{title}\n{table}" if title else table


def ordering_holds(summary: pd.DataFrame, order: Sequence[Level], metric: str = "Mean",
                   tolerance: float = TIE_TOLERANCE) -> bool:
    """
    True when `metric` is non-increasing along `order`, ties within `tolerance` allowed.

    A level given as a tuple of cells counts with the best of them, so
    ["full", ("spatial_only", "temporal_only")] reads full >= max(spatial_only, temporal_only).
    """
    values = [max(summary.loc[name, metric] for name in ((level,) if isinstance(level, str) else level))
              for level in order]
    return all(a >= b - tolerance for a, b in zip(values, values[1:]))


def describe_ordering(order: Sequence[Level]) -> str:
    return " >= ".join(level if isinstance(level, str) else f"max({', '.join(level)})" for level in order)


@dataclass
class AblationSummary:
    table: pd.DataFrame
    ordering: Optional[List[Level]] = None
    ordering_holds: Optional[bool] = None


def ablate(base: ExperimentConfig, grid: Union[str, Sequence[str]], seeds: Sequence[int] = DEFAULT_SEEDS,
           data_dir: Optional[Union[str, Path]] = None, split: str = "test") -> AblationSummary:
    """Median table for a grid; named grids with an expected ordering also say whether it held."""
    table = summarize(AblationService(base, data_dir, seeds, split).run(grid))
    order = ORDERINGS.get(grid) if isinstance(grid, str) else None
    if order is None:
        return AblationSummary(table)
    holds = ordering_holds(table, order)
    logger.info("Ordering %s %s", describe_ordering(order), "holds" if holds else "is violated")
    return AblationSummary(table, list(order), holds)
