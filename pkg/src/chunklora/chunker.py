"""Online grouping of scored tokens into contiguous variable-length chunks.

A chunk closes when it reaches the maximum length, or once past the
minimum length when the running exponential mean of its scores (decay
0.8, seeded with the chunk's first score) escapes the hysteresis band
around the threshold on the side opposite the chunk's opening regime.
The closed chunk's class is high when its arithmetic mean score reaches
the threshold.

Boundaries are causal: they depend only on scores seen so far, so feeding
a trace token by token and replaying it later produce identical chunks.
The high-capacity budget is not enforced here; the plan selector demotes
over-budget chunks downstream, keeping the partition a pure function of
the trace.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, DomainError

EMA_DECAY = 0.8
CLASS_LOW = "low"
CLASS_HIGH = "high"


@dataclass(frozen=True)
class ChunkerConfig:
    tau: float
    l_min: int = 8
    l_max: int = 64
    hysteresis: float = 0.05
    budget_high: int = 4
    crossfade: int = 4

    def __post_init__(self):
        if not 1 <= self.l_min <= self.l_max:
            raise ConfigError(f"need 1 <= l_min <= l_max, got {self.l_min}, {self.l_max}")
        if not (self.tau - self.hysteresis > 0.0 and self.tau + self.hysteresis < 1.0):
            raise ConfigError(
                f"hysteresis band ({self.tau} +/- {self.hysteresis}) must stay inside (0, 1)"
            )
        if self.budget_high < 0:
            raise ConfigError("budget_high must be non-negative")
        if not 0 <= self.crossfade <= self.l_min:
            raise ConfigError("crossfade window must satisfy 0 <= W <= l_min")


@dataclass(frozen=True)
class Chunk:
    start: int  # inclusive token index
    end: int    # exclusive
    mean_complexity: float
    cls: str    # CLASS_LOW or CLASS_HIGH

    def __post_init__(self):
        if self.start >= self.end:
            raise DomainError(f"empty chunk [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start


class Chunker:
    """Single-writer chunking state for one decode stream."""

    def __init__(self, cfg: ChunkerConfig, start: int = 0):
        self.cfg = cfg
        self._start = start
        self._count = 0
        self._sum = 0.0
        self._ema = 0.0
        self._regime = CLASS_LOW
        self._last_ema: float | None = None

    @property
    def current_mean(self) -> float | None:
        """Exponential mean of the open chunk (or the last one observed)."""
        if self._count > 0:
            return self._ema
        return self._last_ema

    def observe(self, score: float) -> Chunk | None:
        """Append one scored token; returns the chunk it closed, if any."""
        if not 0.0 <= score <= 1.0:
            raise DomainError(f"score {score} outside [0, 1]")
        cfg = self.cfg
        if self._count == 0:
            self._ema = score
            self._regime = CLASS_HIGH if score >= cfg.tau else CLASS_LOW
        else:
            self._ema = EMA_DECAY * self._ema + (1.0 - EMA_DECAY) * score
        self._count += 1
        self._sum += score

        if self._count >= cfg.l_max:
            return self._close()
        if self._count >= cfg.l_min:
            if self._regime == CLASS_LOW and self._ema > cfg.tau + cfg.hysteresis:
                return self._close()
            if self._regime == CLASS_HIGH and self._ema < cfg.tau - cfg.hysteresis:
                return self._close()
        return None

    def flush(self) -> Chunk | None:
        """Close the open chunk (may be shorter than l_min); idempotent."""
        if self._count == 0:
            return None
        return self._close()

    def _close(self) -> Chunk:
        mean = self._sum / self._count
        chunk = Chunk(
            start=self._start,
            end=self._start + self._count,
            mean_complexity=mean,
            cls=CLASS_HIGH if mean >= self.cfg.tau else CLASS_LOW,
        )
        self._start = chunk.end
        self._count = 0
        self._sum = 0.0
        self._last_ema = self._ema
        return chunk
