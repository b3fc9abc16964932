"""Percentile calibration and chunk-to-plan mapping.

Calibration turns a bag of validation complexity scores into band edges
(nearest-rank order statistics at p33/p66 by default) plus the chunker
threshold tau (the top edge). Selection maps a closed chunk's mean
complexity to the highest band whose edge it reaches and pairs the band's
(rank, scale) with its cache policy. Top-band plans draw down a
per-sequence budget; once exhausted, further top-band chunks are demoted
one band and flagged.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

from .adapter import ChunkAdapterSetting
from .chunker import Chunk
from .errors import CalibrationError, ConfigError
from .kvcache import FULL, CachePolicy

DEFAULT_EDGE_PERCENTILES = (33, 66)
DEFAULT_RANKS = (4, 8, 16)
DEFAULT_SCALES = (0.5, 0.75, 1.0)
DEFAULT_CACHE_TAGS = ("int8+window(64)", "int8", "full")


@dataclass(frozen=True)
class PolicyTable:
    """Ordered, exhaustive complexity bands and their capacity settings."""

    band_edges: tuple[float, ...]
    rank_per_band: tuple[int, ...]
    scale_per_band: tuple[float, ...]
    cache_per_band: tuple[CachePolicy, ...]
    allow_rank_zero: bool = False

    def __post_init__(self):
        bands = len(self.band_edges) + 1
        if not (len(self.rank_per_band) == len(self.scale_per_band) == len(self.cache_per_band) == bands):
            raise ConfigError(
                f"{len(self.band_edges)} edges imply {bands} bands; "
                "ranks/scales/cache lists must match"
            )
        if any(not 0.0 <= e <= 1.0 for e in self.band_edges):
            raise ConfigError("band edges must lie in [0, 1]")
        if list(self.band_edges) != sorted(self.band_edges):
            raise ConfigError("band edges must be ascending")
        for r in self.rank_per_band:
            if r < 0 or (r == 0 and not self.allow_rank_zero):
                raise ConfigError(f"rank {r} invalid (rank 0 needs allow_rank_zero)")
        if any(not 0.0 <= s <= 1.0 for s in self.scale_per_band):
            raise ConfigError("scales must lie in [0, 1]")
        if list(self.rank_per_band) != sorted(self.rank_per_band):
            raise ConfigError("ranks must be non-decreasing across bands")
        if list(self.scale_per_band) != sorted(self.scale_per_band):
            raise ConfigError("scales must be non-decreasing across bands")

    @property
    def n_bands(self) -> int:
        return len(self.rank_per_band)

    def band_of(self, mean_complexity: float) -> int:
        """Highest band whose edge is <= the chunk mean."""
        return bisect_right(self.band_edges, mean_complexity)


def default_table(band_edges: tuple[float, float]) -> PolicyTable:
    return PolicyTable(
        band_edges=tuple(band_edges),
        rank_per_band=DEFAULT_RANKS,
        scale_per_band=DEFAULT_SCALES,
        cache_per_band=tuple(CachePolicy.parse(t) for t in DEFAULT_CACHE_TAGS),
    )


def nearest_rank_percentile(sorted_scores, percent: int) -> float:
    """Nearest-rank order statistic: value at index ceil(p/100 * n), 1-based."""
    n = len(sorted_scores)
    idx = -(-percent * n // 100)  # ceiling division without float error
    idx = max(1, min(n, idx))
    return float(sorted_scores[idx - 1])


def calibrate(validation_scores, percentiles=DEFAULT_EDGE_PERCENTILES) -> tuple[PolicyTable, float]:
    """Build the default table from validation scores; returns (table, tau).

    Edges are the nearest-rank order statistics at the requested
    percentiles; tau (the chunker threshold default) is the top edge.
    """
    scores = sorted(float(s) for s in validation_scores)
    if len(scores) < 10:
        raise CalibrationError(
            f"calibration needs at least 10 scores, got {len(scores)}"
        )
    if scores[0] < 0.0 or scores[-1] > 1.0:
        raise CalibrationError("complexity scores must lie in [0, 1]")
    edges = tuple(nearest_rank_percentile(scores, p) for p in percentiles)
    table = default_table(edges)
    return table, edges[-1]


@dataclass
class BudgetState:
    """Remaining per-sequence quota of top-band (high-capacity) plans."""

    remaining: int


@dataclass(frozen=True)
class ChunkPlan:
    chunk: Chunk
    setting: ChunkAdapterSetting
    cache_policy: CachePolicy
    demoted: bool = False


def select(table: PolicyTable, chunk: Chunk, budget: BudgetState) -> ChunkPlan:
    """Map a closed chunk to its capacity plan, enforcing the budget.

    A single-band table has no capacity differential, so it neither
    consumes budget nor demotes; degenerate configurations therefore
    collapse exactly onto static behavior.
    """
    band = table.band_of(chunk.mean_complexity)
    demoted = False
    if table.n_bands > 1 and band == table.n_bands - 1:
        if budget.remaining > 0:
            budget.remaining -= 1
        else:
            band = table.n_bands - 2
            demoted = True
    return ChunkPlan(
        chunk=chunk,
        setting=ChunkAdapterSetting(table.rank_per_band[band], table.scale_per_band[band]),
        cache_policy=table.cache_per_band[band],
        demoted=demoted,
    )


def table_to_config_items(table: PolicyTable, tau: float) -> list[tuple[str, str]]:
    """Flat key/value pairs for the runtime config file."""
    return [
        ("policy.band_edges", ",".join(repr(float(e)) for e in table.band_edges)),
        ("policy.ranks", ",".join(str(r) for r in table.rank_per_band)),
        ("policy.scales", ",".join(repr(float(s)) for s in table.scale_per_band)),
        ("policy.cache", ",".join(str(c) for c in table.cache_per_band)),
        ("chunker.tau", repr(float(tau))),
    ]
