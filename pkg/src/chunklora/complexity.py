"""Streaming per-token difficulty signals.

Four signals in [0, 1] per token, fused into one score by a weighted sum:

* ``entropy``    normalized next-token entropy of the current logits,
* ``novelty``    1/(1+c) where c counts prior occurrences of the trailing
                 n-gram inside a sliding window of recent tokens,
* ``attn_proxy`` mean expected attention distance of the previous step's
                 final-layer heads, normalized by the query position
                 (long-range attention scores high),
* ``pos_prior``  exp(-t/T), favoring early positions.

Signals at a step depend only on earlier steps' outputs plus the current
logits, so the estimator never feeds back into the adapter path within a
step. One estimator instance per decode stream.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

DEFAULT_WEIGHTS = (0.45, 0.25, 0.20, 0.10)


@dataclass(frozen=True)
class EstimatorConfig:
    weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS
    ngram_order: int = 3
    novelty_window: int = 512
    prior_timescale: float = 64.0

    def __post_init__(self):
        if len(self.weights) != 4:
            raise ConfigError("exactly four signal weights required")
        if any(w < 0 for w in self.weights):
            raise ConfigError("signal weights must be non-negative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError(f"signal weights must sum to 1, got {sum(self.weights)}")
        if self.ngram_order < 1:
            raise ConfigError("ngram_order must be >= 1")
        if self.novelty_window < 1:
            raise ConfigError("novelty_window must be >= 1")
        if self.prior_timescale <= 0:
            raise ConfigError("prior_timescale must be positive")


@dataclass(frozen=True)
class ComplexitySignals:
    entropy: float
    novelty: float
    attn_proxy: float
    pos_prior: float
    combined: float


def entropy_norm(logits: np.ndarray) -> float:
    """Shannon entropy of softmax(logits) divided by ln(vocab), in [0, 1]."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 2:
        raise DomainError("entropy_norm needs a 1-D logit vector over >= 2 symbols")
    if not np.all(np.isfinite(logits)):
        raise DomainError("entropy_norm needs finite logits")
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    nz = p > 0.0
    h = -float(np.sum(p[nz] * np.log(p[nz])))
    return min(1.0, max(0.0, h / np.log(logits.size)))


def ngram_novelty(history, cfg: EstimatorConfig) -> float:
    """1/(1+c) for the trailing n-gram's prior occurrences inside the window.

    Counts alignments fully contained in the last ``novelty_window`` tokens,
    excluding the trailing occurrence itself; positions before any full
    n-gram exists score 1.0. This is the from-scratch reference; the
    streaming estimator reproduces it incrementally.
    """
    if len(history) == 0:
        raise DomainError("ngram_novelty needs a non-empty history")
    n = cfg.ngram_order
    if len(history) < n or cfg.novelty_window < n:
        return 1.0
    window = list(history[max(0, len(history) - cfg.novelty_window):])
    gram = tuple(window[-n:])
    count = sum(
        1 for i in range(len(window) - n + 1) if tuple(window[i : i + n]) == gram
    )
    return 1.0 / count  # trailing occurrence itself contributes 1


def attention_proxy(attn_weights, query_pos: int) -> float:
    """Mean over heads of normalized expected attention distance.

    Each head's distribution covers positions 0..query_pos; all mass on
    the current position scores 0, all mass on position 0 scores 1.
    """
    if query_pos == 0:
        return 0.0
    total = 0.0
    heads = 0
    for dist in attn_weights:
        d = np.asarray(dist, dtype=np.float64)
        if d.shape != (query_pos + 1,):
            raise DomainError(
                f"attention distribution must cover 0..{query_pos}, got shape {d.shape}"
            )
        if np.any(d < -1e-12) or abs(d.sum() - 1.0) > 1e-4:
            raise DomainError("malformed attention distribution")
        distance = float(np.sum(d * (query_pos - np.arange(query_pos + 1))))
        total += distance / query_pos
        heads += 1
    if heads == 0:
        raise DomainError("attention_proxy needs at least one head")
    return min(1.0, max(0.0, total / heads))


def positional_prior(t: int, cfg: EstimatorConfig) -> float:
    if t < 0:
        raise DomainError("position must be non-negative")
    return float(np.exp(-t / cfg.prior_timescale))


def combine(signals, cfg: EstimatorConfig) -> float:
    """Clamped weighted sum of the four signals."""
    if len(signals) != 4:
        raise ConfigError("combine expects four signals")
    total = sum(w * s for w, s in zip(cfg.weights, signals))
    return min(1.0, max(0.0, total))


class ComplexityEstimator:
    """Per-stream streaming scorer.

    ``observe`` is called once per processed token with the step's logits
    and the previous step's final-layer attention (None at position 0).
    Novelty counts are maintained incrementally over the sliding window
    and match :func:`ngram_novelty` recomputed from scratch at every
    prefix.
    """

    def __init__(self, cfg: EstimatorConfig | None = None):
        self.cfg = cfg or EstimatorConfig()
        self._history: list[int] = []
        self._counts: Counter = Counter()
        self._next_evict = 0  # start index of the oldest counted n-gram

    def _novelty(self, token: int) -> float:
        cfg = self.cfg
        self._history.append(token)
        t = len(self._history) - 1
        n = cfg.ngram_order
        if t + 1 < n or cfg.novelty_window < n:
            return 1.0
        low = t + 1 - cfg.novelty_window  # grams must start at or after this
        while self._next_evict < low:
            old = tuple(self._history[self._next_evict : self._next_evict + n])
            self._counts[old] -= 1
            if self._counts[old] == 0:
                del self._counts[old]
            self._next_evict += 1
        gram = tuple(self._history[t - n + 1 : t + 1])
        prior = self._counts[gram]
        self._counts[gram] += 1
        return 1.0 / (1.0 + prior)

    def observe(self, token: int, logits: np.ndarray, prev_attn, position: int) -> ComplexitySignals:
        entropy = entropy_norm(logits)
        novelty = self._novelty(token)
        proxy = 0.0 if position == 0 or prev_attn is None else attention_proxy(
            prev_attn, position - 1
        )
        prior = positional_prior(position, self.cfg)
        combined = combine((entropy, novelty, proxy, prior), self.cfg)
        return ComplexitySignals(entropy, novelty, proxy, prior, combined)
