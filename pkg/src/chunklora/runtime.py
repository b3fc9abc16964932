"""Decode orchestration and the benchmark harness.

Per stream, each step runs estimator -> chunker -> plan selection ->
adapter/cache application:

* signals come from the previous step's outputs plus the current logits;
* when the chunker closes a chunk, its plan is selected (budget aware),
  the chunk's cache span is sealed with the plan's cache policy, and the
  plan's adapter setting takes effect at the next token with a W-token
  linear cross-fade from the previous setting (lambda ramps the outgoing
  side down from 1);
* the first chunk, having no predecessor plan, runs under the lowest
  band's setting.

Static mode bypasses estimator, chunker and policy entirely and applies
one (rank, scale) with a FULL cache everywhere; a degenerate single-band
chunkwise table with W = 0 reproduces it bit for bit.

Metrics are line-delimited JSON: one record per chunk plus one summary
record. Everything except wall-clock fields is deterministic for a fixed
config. Model weights, ladders and policy tables are shared read-only
across streams; each stream owns its cache, estimator and chunker.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .adapter import (
    ActiveAdapterSet,
    ChunkAdapterSetting,
    RankLadder,
    Site,
    build_rank_ladder,
    load_adapter,
    synthesize_adapter,
)
from .chunker import Chunk, Chunker
from .complexity import ComplexityEstimator
from .config import MODE_CHUNKWISE, MODE_STATIC, RunConfig
from .errors import ConfigError, DomainError, StateError
from .kvcache import FULL, CachePolicy, KvStore
from .policy import BudgetState, PolicyTable, select
from .toymodel import (
    ModelWeights,
    adapter_sites,
    forward_step,
    greedy_token,
    init_model,
    load_model,
    new_cache,
    projection_dims,
)

# Summary fields that vary run to run; everything else must be byte-identical.
WALL_CLOCK_FIELDS = ("ms_per_token",)


@dataclass
class Session:
    """Shared read-only state: weights, rank ladders, policy table."""

    cfg: RunConfig
    weights: ModelWeights
    ladders: dict[Site, RankLadder]
    table: PolicyTable | None

    @property
    def mode(self) -> str:
        return self.cfg.mode


def build_session(cfg: RunConfig) -> Session:
    """Load or synthesize the model and adapters; build each ladder once."""
    weights = load_model(cfg.model_file) if cfg.model_file else init_model(cfg.model)
    mcfg = weights.cfg

    adapters = []
    if cfg.adapter_files:
        adapters = [load_adapter(p) for p in cfg.adapter_files]
    elif cfg.adapter_seed is not None:
        for i, site in enumerate(adapter_sites(mcfg)):
            d_out, d_in = projection_dims(mcfg, site.proj)
            adapters.append(
                synthesize_adapter(site, d_out, d_in, cfg.adapter_r_max, cfg.adapter_seed + i)
            )
    for a in adapters:
        d_out, d_in = projection_dims(mcfg, a.site.proj)
        if (a.d_out, a.d_in) != (d_out, d_in):
            raise ConfigError(
                f"adapter at {a.site} has shape ({a.d_out}, {a.d_in}), "
                f"model expects ({d_out}, {d_in})"
            )
    ladders = {a.site: build_rank_ladder(a, cfg.allowed_ranks) for a in adapters}

    table = None
    if cfg.mode == MODE_CHUNKWISE:
        table = cfg.policy_table()
        _validate_chunkwise(cfg, table)
    elif cfg.mode == MODE_STATIC:
        if ladders and cfg.static_rank != 0 and cfg.static_rank not in cfg.allowed_ranks:
            raise ConfigError(
                f"static rank {cfg.static_rank} not in allowed ranks {cfg.allowed_ranks}"
            )
    else:
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    return Session(cfg=cfg, weights=weights, ladders=ladders, table=table)


def _validate_chunkwise(cfg: RunConfig, table: PolicyTable) -> None:
    chunker_cfg = cfg.chunker_config()  # raises if tau missing
    for rank in table.rank_per_band:
        if rank != 0 and rank not in cfg.allowed_ranks:
            raise ConfigError(f"band rank {rank} not in allowed ranks {cfg.allowed_ranks}")
    for policy in table.cache_per_band:
        if policy.window is not None and policy.window < chunker_cfg.crossfade:
            raise ConfigError(
                f"cache window {policy.window} smaller than cross-fade "
                f"{chunker_cfg.crossfade}; boundary tokens would be dropped"
            )


@dataclass
class MetricsReport:
    mode: str
    tokens_generated: int
    total_tokens: int
    ms_per_token: float
    adapter_macs: int
    peak_cache_bytes: int
    perplexity: float | None
    initial_rank: int | None
    initial_scale: float | None
    crossfade: int
    chunk_records: list[dict] = field(default_factory=list)

    def summary_record(self) -> dict:
        return {
            "record": "summary",
            "mode": self.mode,
            "tokens_generated": self.tokens_generated,
            "total_tokens": self.total_tokens,
            "ms_per_token": self.ms_per_token,
            "adapter_macs": self.adapter_macs,
            "peak_cache_bytes": self.peak_cache_bytes,
            "perplexity": self.perplexity,
            "initial_rank": self.initial_rank,
            "initial_scale": self.initial_scale,
            "crossfade": self.crossfade,
        }

    def records(self) -> list[dict]:
        return [*self.chunk_records, self.summary_record()]

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records()) + "\n"


class DecodeStream:
    """One decoding sequence: owns its cache, estimator, chunker and budget."""

    def __init__(self, session: Session, name: str = "stream"):
        self.session = session
        self.name = name
        cfg = session.cfg
        mcfg = session.weights.cfg
        self.cache = new_cache(mcfg, sink_prefix=cfg.sink_prefix)
        self.adapter_set = ActiveAdapterSet()
        self.chunk_records: list[dict] = []
        self.tokens_processed = 0
        self.tokens_generated = 0
        self._prev_logits: np.ndarray | None = None
        self._prev_attn = None
        self._nll_sum = 0.0
        self._nll_count = 0
        self._finished = False

        if session.mode == MODE_CHUNKWISE:
            self.estimator = ComplexityEstimator(cfg.estimator)
            self.chunker_cfg = cfg.chunker_config()
            self.chunker = Chunker(self.chunker_cfg)
            self.budget = BudgetState(self.chunker_cfg.budget_high)
            table = session.table
            self.active_setting = ChunkAdapterSetting(
                table.rank_per_band[0], table.scale_per_band[0]
            )
        else:
            self.estimator = None
            self.chunker = None
            self.budget = None
            self.active_setting = ChunkAdapterSetting(cfg.static_rank, cfg.static_scale)
        self._fade_from: ChunkAdapterSetting | None = None
        self._fade_start = 0
        self._applied_key = None

    # -- schedule -------------------------------------------------------------

    @property
    def initial_setting(self) -> ChunkAdapterSetting | None:
        if not self.session.ladders:
            return None
        cfg = self.session.cfg
        if self.session.mode == MODE_STATIC:
            return ChunkAdapterSetting(cfg.static_rank, cfg.static_scale)
        table = self.session.table
        return ChunkAdapterSetting(table.rank_per_band[0], table.scale_per_band[0])

    @property
    def current_mean(self) -> float | None:
        """Exponential-mean complexity of the stream, for batch bucketing."""
        return self.chunker.current_mean if self.chunker is not None else None

    def _apply_schedule(self, position: int) -> None:
        if not self.session.ladders:
            return
        w = self.chunker_cfg.crossfade if self.session.mode == MODE_CHUNKWISE else 0
        fading = (
            self._fade_from is not None
            and self._fade_start <= position < self._fade_start + w
        )
        if fading:
            lam = 1.0 - (position - self._fade_start) / w
            key = ("fade", self._fade_start, position)
        else:
            if self._fade_from is not None and position >= self._fade_start + w:
                self._fade_from = None
            lam = 0.0
            key = ("single", self.active_setting)
        if key == self._applied_key:
            return
        for ladder in self.session.ladders.values():
            if fading:
                self.adapter_set.activate(
                    ladder, self.active_setting, outgoing=self._fade_from, fade_lambda=lam
                )
            else:
                self.adapter_set.activate(ladder, self.active_setting)
        self._applied_key = key

    def _on_chunk_closed(self, chunk: Chunk) -> None:
        plan = select(self.session.table, chunk, self.budget)
        self.cache.seal_span(chunk.start, chunk.end, plan.cache_policy)
        self.chunk_records.append(
            {
                "record": "chunk",
                "start": chunk.start,
                "end": chunk.end,
                "class": chunk.cls,
                "mean_complexity": round(chunk.mean_complexity, 12),
                "rank": plan.setting.rank,
                "scale": plan.setting.scale,
                "policy": str(plan.cache_policy),
                "demoted": plan.demoted,
                "applies_from": chunk.end,
            }
        )
        if plan.setting != self.active_setting and self.chunker_cfg.crossfade > 0:
            self._fade_from = self.active_setting
            self._fade_start = chunk.end
        else:
            self._fade_from = None
        self.active_setting = plan.setting

    # -- stepping -------------------------------------------------------------

    def step(self, token: int, forced: bool) -> np.ndarray:
        """Process one token; returns this step's logits."""
        if self._finished:
            raise StateError("stream already finished")
        position = self.cache.seq_len
        self._apply_schedule(position)
        out = forward_step(self.session.weights, token, self.cache, self.adapter_set)

        if forced and position >= 1:
            self._nll_sum += _nll(self._prev_logits, token)
            self._nll_count += 1
        self._prev_logits = out.logits

        if self.session.mode == MODE_CHUNKWISE:
            signals = self.estimator.observe(token, out.logits, self._prev_attn, position)
            self._prev_attn = out.attn_weights[-1]
            closed = self.chunker.observe(signals.combined)
            if closed is not None:
                self._on_chunk_closed(closed)
        self.tokens_processed += 1
        if not forced:
            self.tokens_generated += 1
        return out.logits

    def finish(self) -> None:
        """Flush the open chunk and seal its span; idempotent."""
        if self._finished:
            return
        self._finished = True
        if self.session.mode == MODE_CHUNKWISE:
            tail = self.chunker.flush()
            if tail is not None:
                self._on_chunk_closed(tail)
        elif self.tokens_processed > 0:
            cfg = self.session.cfg
            self.chunk_records.append(
                {
                    "record": "chunk",
                    "start": 0,
                    "end": self.tokens_processed,
                    "class": "static",
                    "mean_complexity": None,
                    "rank": cfg.static_rank,
                    "scale": cfg.static_scale,
                    "policy": str(FULL),
                    "demoted": False,
                    "applies_from": 0,
                }
            )

    # -- results --------------------------------------------------------------

    def perplexity_value(self) -> float:
        if self._nll_count == 0:
            raise DomainError("no teacher-forced predictions to score")
        return float(np.exp(self._nll_sum / self._nll_count))

    def report(self, wall_seconds: float) -> MetricsReport:
        initial = self.initial_setting
        ppl = None
        if self._nll_count > 0:
            ppl = self.perplexity_value()
        per_token = (
            wall_seconds * 1000.0 / self.tokens_processed if self.tokens_processed else 0.0
        )
        return MetricsReport(
            mode=self.session.mode,
            tokens_generated=self.tokens_generated,
            total_tokens=self.tokens_processed,
            ms_per_token=per_token,
            adapter_macs=self.adapter_set.mac_count,
            peak_cache_bytes=self.cache.peak_bytes,
            perplexity=ppl,
            initial_rank=initial.rank if initial else None,
            initial_scale=initial.scale if initial else None,
            crossfade=self.chunker_cfg.crossfade if self.session.mode == MODE_CHUNKWISE else 0,
            chunk_records=self.chunk_records,
        )


def _nll(logits: np.ndarray, token: int) -> float:
    z = logits.astype(np.float64)
    z -= z.max()
    return float(np.log(np.sum(np.exp(z))) - z[token])


def run_stream(session: Session, prompt: bytes, n_generate: int, name: str = "stream"):
    """Prefill the prompt, then greedily generate; returns (tokens, report)."""
    if len(prompt) == 0:
        raise ConfigError("decoding needs a non-empty prompt")
    stream = DecodeStream(session, name=name)
    start = time.perf_counter()
    logits = None
    for b in prompt:
        logits = stream.step(int(b), forced=True)
    generated = bytearray()
    for _ in range(n_generate):
        nxt = greedy_token(logits)
        generated.append(nxt)
        logits = stream.step(nxt, forced=False)
    stream.finish()
    report = stream.report(time.perf_counter() - start)
    return bytes(generated), report


def decode(cfg: RunConfig, prompt: bytes | None = None, session: Session | None = None):
    """Top-level decode op: returns (generated bytes, MetricsReport).

    Writes the metrics file when the config names one. Reuse a prebuilt
    session to amortize ladder construction across calls.
    """
    session = session or build_session(cfg)
    prompt = prompt if prompt is not None else cfg.prompt
    if not prompt:
        raise ConfigError("no prompt given (prompt.text / prompt.hex / prompt.file)")
    tokens, report = run_stream(session, prompt, cfg.decode_length)
    if cfg.eval_text is not None:
        report.perplexity = perplexity(cfg, cfg.eval_text, session=session)
    if cfg.metrics_path:
        with open(cfg.metrics_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_jsonl())
    return tokens, report


def teacher_forced_report(session: Session, text: bytes, name: str = "eval") -> MetricsReport:
    """Run the full schedule over forced tokens; report includes perplexity."""
    if len(text) < 2:
        raise DomainError("teacher-forced evaluation needs at least 2 bytes")
    stream = DecodeStream(session, name=name)
    start = time.perf_counter()
    for b in text:
        stream.step(int(b), forced=True)
    stream.finish()
    return stream.report(time.perf_counter() - start)


def perplexity(cfg: RunConfig, eval_text: bytes, session: Session | None = None) -> float:
    """Teacher-forced perplexity with the configured schedule applied."""
    session = session or build_session(cfg)
    return teacher_forced_report(session, eval_text).perplexity


@dataclass(frozen=True)
class Bucket:
    band: int
    streams: tuple[DecodeStream, ...]


def bucket_batch(streams, table: PolicyTable) -> list[Bucket]:
    """Group streams by the policy band of their current exponential mean.

    Returns non-empty buckets in band order; every input stream lands in
    exactly one bucket.
    """
    by_band: dict[int, list[DecodeStream]] = {}
    for stream in streams:
        mean = stream.current_mean
        if mean is None:
            raise StateError(f"stream {stream.name!r} has no scored tokens yet")
        by_band.setdefault(table.band_of(mean), []).append(stream)
    return [Bucket(band, tuple(by_band[band])) for band in sorted(by_band)]


def calibration_scores(cfg: RunConfig, corpus: list[bytes]) -> list[float]:
    """Per-token combined complexity over a corpus, teacher forced.

    Calibration runs on the frozen base path (no adapters, FULL cache) so
    the resulting percentiles do not depend on any adapter schedule.
    """
    weights = load_model(cfg.model_file) if cfg.model_file else init_model(cfg.model)
    scores: list[float] = []
    empty = ActiveAdapterSet()
    for seq in corpus:
        estimator = ComplexityEstimator(cfg.estimator)
        cache = new_cache(weights.cfg, sink_prefix=cfg.sink_prefix)
        prev_attn = None
        for position, b in enumerate(seq):
            out = forward_step(weights, int(b), cache, empty)
            sig = estimator.observe(int(b), out.logits, prev_attn, position)
            prev_attn = out.attn_weights[-1]
            scores.append(sig.combined)
    return scores


def bench(configs: list[RunConfig], corpus: list[bytes], labels: list[str] | None = None) -> dict:
    """Run every config over the same teacher-forced corpus and compare.

    Reports wall-clock ms/token, modeled adapter multiply-accumulates,
    peak cache bytes and perplexity per config, plus deltas against the
    first config. All non-wall-clock numbers are deterministic.
    """
    if len(configs) < 2:
        raise ConfigError("bench needs at least two configs")
    if labels is None:
        labels = [f"config{i}" for i in range(len(configs))]
    if len(labels) != len(configs):
        raise ConfigError("one label per config required")

    results = []
    for label, cfg in zip(labels, configs):
        session = build_session(cfg)
        total_macs = 0
        peak = 0
        nll_sum = 0.0
        nll_count = 0
        tokens = 0
        start = time.perf_counter()
        for i, seq in enumerate(corpus):
            report = teacher_forced_report(session, seq, name=f"{label}[{i}]")
            total_macs += report.adapter_macs
            peak = max(peak, report.peak_cache_bytes)
            stream_tokens = report.total_tokens
            tokens += stream_tokens
            # recover the per-sequence NLL mass from the reported perplexity
            nll_sum += np.log(report.perplexity) * (stream_tokens - 1)
            nll_count += stream_tokens - 1
        wall = time.perf_counter() - start
        results.append(
            {
                "label": label,
                "mode": cfg.mode if cfg.mode == MODE_CHUNKWISE
                else f"static({cfg.static_rank},{cfg.static_scale})",
                "sequences": len(corpus),
                "tokens": tokens,
                "ms_per_token": wall * 1000.0 / tokens if tokens else 0.0,
                "adapter_macs": total_macs,
                "peak_cache_bytes": peak,
                "perplexity": float(np.exp(nll_sum / nll_count)) if nll_count else None,
            }
        )

    base = results[0]
    deltas = []
    for row in results[1:]:
        deltas.append(
            {
                "label": row["label"],
                "vs": base["label"],
                "adapter_macs_ratio": _ratio(row["adapter_macs"], base["adapter_macs"]),
                "peak_cache_ratio": _ratio(row["peak_cache_bytes"], base["peak_cache_bytes"]),
                "perplexity_rel_delta": _rel_delta(row["perplexity"], base["perplexity"]),
                "ms_per_token_ratio": _ratio(row["ms_per_token"], base["ms_per_token"]),
            }
        )
    return {"configs": results, "deltas_vs_first": deltas}


def _ratio(a, b):
    return float(a / b) if b else None


def _rel_delta(a, b):
    if a is None or b is None or b == 0:
        return None
    return float((a - b) / b)
