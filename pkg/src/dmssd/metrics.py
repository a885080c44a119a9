"""Episode bookkeeping and the MST / RM training metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import MetricUndefined
from .gridmap import Coord, GridMap, UNREACHABLE, is_rendezvous_feasible, shortest_path_distances

NA = "NA"


@dataclass
class EpisodeStats:
    length: int
    reward_sum: float
    achieved: bool
    initial_positions: tuple[Coord, ...]
    final_cell: Optional[Coord]
    optimal_steps: Optional[int] = None
    iteration: int = 0

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("episode length must be >= 1")


def mean_steps_taken(stats: Sequence[EpisodeStats]) -> float:
    """Mean length of the achieved episodes."""
    if not stats:
        raise MetricUndefined("no episodes")
    lengths = [s.length for s in stats if s.achieved]
    if not lengths:
        raise MetricUndefined("no achieved episodes")
    return float(np.mean(lengths))


def rewards_mean(stats: Sequence[EpisodeStats]) -> float:
    if not stats:
        raise MetricUndefined("no episodes")
    return float(np.mean([s.reward_sum for s in stats]))


def metric_or_na(fn, stats):
    try:
        return fn(stats)
    except MetricUndefined:
        return NA


def parse_metric(v) -> float:
    """CSV cell to float, ``NA`` to nan."""
    return math.nan if v in (NA, "", None) else float(v)


def bottleneck_steps(grid: GridMap, positions: Sequence[Coord], target: Coord) -> int:
    """Steps the slowest robot needs to reach ``target`` along shortest paths."""
    if not is_rendezvous_feasible(grid, positions):
        raise MetricUndefined("robots cannot meet")
    field = shortest_path_distances(grid, target)
    d = [field[p] for p in positions]
    if UNREACHABLE in d:
        raise MetricUndefined("target unreachable")
    return int(max(d))
