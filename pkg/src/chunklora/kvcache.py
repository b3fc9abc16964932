"""Per-layer, per-head key/value cache with per-span policies.

A decode stream owns one store. Every step appends one key/value pair per
(layer, head); when the scheduler closes a chunk it seals that token range
across all heads with the chunk's cache policy:

* ``FULL``      keeps float32 values untouched,
* ``INT8``      quantizes the span symmetrically with one float32 scale
                per (span, head, tensor),
* ``WINDOW(w)`` marks positions older than (current - w) excluded, sparing
                the protected sink prefix,
* ``SPARSIFY(k)`` keeps the k span positions with the largest attention
                mass accumulated over queries so far (plus sinks).

Excluded positions are masked, not physically freed, but byte accounting
reports them as freed. ``attend`` is a masked softmax over included
positions with float64 accumulation; with a FULL store it reproduces a
from-scratch attention computation bit for bit (same summation order).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PolicyError, RangeError, ShapeError, StateError

DEFAULT_SINK_PREFIX = 4

_POLICY_RE = re.compile(r"^(window|sparsify)\((\d+)\)$")


@dataclass(frozen=True)
class CachePolicy:
    """Span storage policy; INT8 composes with WINDOW or SPARSIFY."""

    int8: bool = False
    window: int | None = None
    sparsify: int | None = None

    def __post_init__(self):
        if self.window is not None and self.window < 1:
            raise ConfigError("window size must be >= 1")
        if self.sparsify is not None and self.sparsify < 1:
            raise ConfigError("sparsify keep count must be >= 1")
        if self.window is not None and self.sparsify is not None:
            raise ConfigError("window and sparsify cannot combine")

    @property
    def compressive(self) -> bool:
        return self.int8 or self.window is not None or self.sparsify is not None

    def __str__(self) -> str:
        parts = []
        if self.int8:
            parts.append("int8")
        if self.window is not None:
            parts.append(f"window({self.window})")
        if self.sparsify is not None:
            parts.append(f"sparsify({self.sparsify})")
        return "+".join(parts) if parts else "full"

    @classmethod
    def parse(cls, text: str) -> "CachePolicy":
        """Parse tags like ``full``, ``int8``, ``int8+window(64)``."""
        spec = text.strip().lower()
        if spec == "full":
            return cls()
        int8 = False
        window = None
        sparsify = None
        for part in spec.split("+"):
            part = part.strip()
            if part == "int8":
                if int8:
                    raise ConfigError(f"duplicate int8 in policy {text!r}")
                int8 = True
                continue
            m = _POLICY_RE.match(part)
            if not m:
                raise ConfigError(f"unknown cache policy component {part!r}")
            if m.group(1) == "window":
                if window is not None:
                    raise ConfigError(f"duplicate window in policy {text!r}")
                window = int(m.group(2))
            else:
                if sparsify is not None:
                    raise ConfigError(f"duplicate sparsify in policy {text!r}")
                sparsify = int(m.group(2))
        return cls(int8=int8, window=window, sparsify=sparsify)


FULL = CachePolicy()


def _quantize_block(block: np.ndarray) -> tuple[np.ndarray, np.float32]:
    """Symmetric int8 quantization: scale = max|x|/127, round half to even.

    The scale is stored as float32 but the rounding runs in float64, and
    dequantization multiplies in float64 where int8 * float32-scale is
    exact; the round-trip error stays within scale/2 elementwise.
    """
    amax = np.float32(np.max(np.abs(block))) if block.size else np.float32(0.0)
    scale = amax / np.float32(127.0)
    if scale == 0.0:
        return np.zeros(block.shape, dtype=np.int8), np.float32(0.0)
    q = np.clip(np.round(block.astype(np.float64) / np.float64(scale)), -127, 127)
    return q.astype(np.int8), scale


class _Span:
    """Sealed token range for one (layer, head)."""

    __slots__ = ("start", "end", "policy", "included", "k", "v", "k_scale", "v_scale")

    def __init__(self, start, end, policy, included, k, v, k_scale=None, v_scale=None):
        self.start = start
        self.end = end
        self.policy = policy
        self.included = included
        self.k = k
        self.v = v
        self.k_scale = k_scale
        self.v_scale = v_scale

    def keys_f64(self) -> np.ndarray:
        if self.policy.int8:
            return self.k.astype(np.float64) * np.float64(self.k_scale)
        return self.k.astype(np.float64)

    def values_f64(self) -> np.ndarray:
        if self.policy.int8:
            return self.v.astype(np.float64) * np.float64(self.v_scale)
        return self.v.astype(np.float64)

    def bytes_used(self) -> int:
        n = int(np.sum(self.included))
        d = self.k.shape[1]
        if self.policy.int8:
            return 2 * n * d + 8  # int8 payload + two float32 scales
        return 2 * n * d * 4


class _HeadStore:
    __slots__ = ("spans", "open_k", "open_v", "open_start")

    def __init__(self):
        self.spans: list[_Span] = []
        self.open_k: list[np.ndarray] = []
        self.open_v: list[np.ndarray] = []
        self.open_start = 0

    @property
    def count(self) -> int:
        return self.open_start + len(self.open_k)


class KvStore:
    """Key/value history for one decode stream (single writer)."""

    def __init__(self, n_layers: int, n_heads: int, d_head: int, sink_prefix: int = DEFAULT_SINK_PREFIX):
        if n_layers < 1 or n_heads < 1 or d_head < 1:
            raise ConfigError("store dimensions must be positive")
        if sink_prefix < 0:
            raise ConfigError("sink prefix must be non-negative")
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_head = d_head
        self.sink_prefix = sink_prefix
        self._heads = [[_HeadStore() for _ in range(n_heads)] for _ in range(n_layers)]
        self._mass = [[[] for _ in range(n_heads)] for _ in range(n_layers)]
        self._current = 0
        self._peak = 0

    # -- write path ---------------------------------------------------------

    def _head(self, layer: int, head: int) -> _HeadStore:
        if not (0 <= layer < self.n_layers) or not (0 <= head < self.n_heads):
            raise RangeError(f"no such (layer, head) = ({layer}, {head})")
        return self._heads[layer][head]

    def append(self, layer: int, head: int, k: np.ndarray, v: np.ndarray) -> int:
        """Append one key/value pair; returns the position index."""
        hs = self._head(layer, head)
        k = np.asarray(k, dtype=np.float32)
        v = np.asarray(v, dtype=np.float32)
        if k.shape != (self.d_head,) or v.shape != (self.d_head,):
            raise ShapeError(f"key/value must have length {self.d_head}")
        pos = hs.count
        hs.open_k.append(k)
        hs.open_v.append(v)
        self._mass[layer][head].append(0.0)
        self._current += 2 * self.d_head * 4
        if self._current > self._peak:
            self._peak = self._current
        return pos

    @property
    def seq_len(self) -> int:
        """Appended positions of head (0, 0); all heads must stay in step."""
        return self._heads[0][0].count

    def seal_span(self, start: int, end: int, policy: CachePolicy) -> None:
        """Seal [start, end) across every (layer, head) with one policy.

        The range must begin exactly where the open region starts; sealing
        into an already-sealed region raises StateError.
        """
        counts = {hs.count for row in self._heads for hs in row}
        if len(counts) > 1:
            raise StateError("heads out of step; append to every (layer, head) each step")
        current = counts.pop()
        if start >= end:
            raise RangeError(f"empty seal range [{start}, {end})")
        if end > current:
            raise RangeError(f"seal range end {end} beyond appended count {current}")
        open_start = self._heads[0][0].open_start
        if start != open_start:
            raise StateError(
                f"seal must start at the open region ({open_start}), got {start}"
                + (" (already sealed)" if start < open_start else "")
            )
        for layer in range(self.n_layers):
            for head in range(self.n_heads):
                self._seal_one(layer, head, start, end, policy, current)
        if self._current > self._peak:
            self._peak = self._current
        assert self._current == self._recompute_bytes(), "byte accounting drift"

    def _seal_one(self, layer, head, start, end, policy, current):
        hs = self._heads[layer][head]
        n = end - start
        k_block = np.stack(hs.open_k[:n])
        v_block = np.stack(hs.open_v[:n])
        del hs.open_k[:n]
        del hs.open_v[:n]
        hs.open_start = end

        positions = np.arange(start, end)
        included = np.ones(n, dtype=bool)
        if policy.window is not None:
            old = positions < current - policy.window
            included &= ~(old & (positions >= self.sink_prefix))
        elif policy.sparsify is not None:
            mass = np.asarray(self._mass[layer][head][start:end])
            order = np.lexsort((positions, -mass))  # mass desc, position asc
            keep = set(positions[order[: policy.sparsify]].tolist())
            keep.update(p for p in positions.tolist() if p < self.sink_prefix)
            included = np.array([p in keep for p in positions.tolist()])

        if policy.int8:
            k_q, k_scale = _quantize_block(k_block)
            v_q, v_scale = _quantize_block(v_block)
            span = _Span(start, end, policy, included, k_q, v_q, k_scale, v_scale)
        else:
            span = _Span(start, end, policy, included, k_block, v_block)
        hs.spans.append(span)
        self._current += span.bytes_used() - 2 * n * self.d_head * 4

    # -- read path ----------------------------------------------------------

    def attend(self, layer: int, head: int, query: np.ndarray, current_pos: int):
        """Masked softmax attention over included positions <= current_pos.

        Returns (context vector float32, participating position count).
        Scores are raw dot products; scale the query beforehand if needed.
        """
        ctx, count, _, _ = self.attend_detail(layer, head, query, current_pos)
        return ctx, count

    def attend_detail(self, layer: int, head: int, query: np.ndarray, current_pos: int):
        """Like attend, additionally returning (positions, weights)."""
        hs = self._head(layer, head)
        query = np.asarray(query, dtype=np.float32)
        if query.shape != (self.d_head,):
            raise ShapeError(f"query must have length {self.d_head}")

        key_blocks = []
        value_blocks = []
        position_blocks = []
        for span in hs.spans:
            if span.start > current_pos:
                break
            sel = span.included.copy()
            if span.end > current_pos + 1:
                sel &= np.arange(span.start, span.end) <= current_pos
            if not sel.any():
                continue
            key_blocks.append(span.keys_f64()[sel])
            value_blocks.append(span.values_f64()[sel])
            position_blocks.append(np.arange(span.start, span.end)[sel])
        n_open = min(len(hs.open_k), max(0, current_pos + 1 - hs.open_start))
        if n_open > 0:
            key_blocks.append(np.stack(hs.open_k[:n_open]).astype(np.float64))
            value_blocks.append(np.stack(hs.open_v[:n_open]).astype(np.float64))
            position_blocks.append(np.arange(hs.open_start, hs.open_start + n_open))

        if not key_blocks:
            raise PolicyError(
                f"no included cache positions at (layer {layer}, head {head}); "
                "window policy too aggressive"
            )
        keys = np.concatenate(key_blocks) if len(key_blocks) > 1 else key_blocks[0]
        values = np.concatenate(value_blocks) if len(value_blocks) > 1 else value_blocks[0]
        positions = np.concatenate(position_blocks) if len(position_blocks) > 1 else position_blocks[0]

        scores = keys @ query.astype(np.float64)
        scores -= scores.max()
        weights = np.exp(scores)
        weights /= weights.sum()
        context = (weights @ values).astype(np.float32)

        mass = self._mass[layer][head]
        for pos, w in zip(positions.tolist(), weights.tolist()):
            mass[pos] += w
        return context, int(positions.shape[0]), positions, weights

    # -- accounting ----------------------------------------------------------

    def memory_bytes(self) -> int:
        """Exact byte total; excluded positions count as freed."""
        return self._current

    @property
    def peak_bytes(self) -> int:
        return self._peak

    def _recompute_bytes(self) -> int:
        total = 0
        for row in self._heads:
            for hs in row:
                for span in hs.spans:
                    total += span.bytes_used()
                total += 2 * len(hs.open_k) * self.d_head * 4
        return total
