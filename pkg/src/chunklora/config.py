"""Run configuration: flat key-value config files and the synthetic corpus.

Config files are plain text, one ``key = value`` per line, ``#`` comments
allowed. Every key mirrors a RunConfig field; unknown keys are rejected.
The calibrate command writes the ``policy.*`` keys and ``chunker.tau``
into this format. See the README for the full key table.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

from .chunker import ChunkerConfig
from .complexity import EstimatorConfig
from .errors import ConfigError, FormatError
from .kvcache import CachePolicy
from .policy import DEFAULT_CACHE_TAGS, DEFAULT_RANKS, DEFAULT_SCALES, PolicyTable
from .toymodel import ModelConfig

MODE_CHUNKWISE = "chunkwise"
MODE_STATIC = "static"

_STATIC_RE = re.compile(r"^static\(\s*(\d+)\s*,\s*([0-9.eE+-]+)\s*\)$")

# Benchmark-scale defaults: sequences and length for corpus generation.
DEFAULT_CORPUS_SEQUENCES = 1000
DEFAULT_SEQUENCE_LENGTH = 256

# Bimodal corpus construction: spans of a repeated motif alternating with
# uniform-random bytes.
MOTIF_LEN = 8
LOW_SPAN = 32
HIGH_SPAN = 16


@dataclass(frozen=True)
class RunConfig:
    # model source
    model_file: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    # adapters: explicit files, or synthesized per site from a seed
    adapter_files: tuple[str, ...] = ()
    adapter_seed: int | None = None
    adapter_r_max: int = 16
    allowed_ranks: tuple[int, ...] = (4, 8, 16)
    # estimator
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    # chunker (tau arrives from calibration)
    l_min: int = 8
    l_max: int = 64
    tau: float | None = None
    hysteresis: float = 0.05
    budget_high: int = 4
    crossfade: int = 4
    # policy table
    band_edges: tuple[float, ...] | None = None
    ranks: tuple[int, ...] = DEFAULT_RANKS
    scales: tuple[float, ...] = DEFAULT_SCALES
    cache_tags: tuple[str, ...] = DEFAULT_CACHE_TAGS
    allow_rank_zero: bool = False
    # cache
    sink_prefix: int = 4
    # execution
    mode: str = MODE_CHUNKWISE
    static_rank: int = 16
    static_scale: float = 1.0
    decode_length: int = 256
    prompt: bytes | None = None
    eval_text: bytes | None = None
    metrics_path: str | None = None

    def chunker_config(self) -> ChunkerConfig:
        if self.tau is None:
            raise ConfigError(
                "chunkwise mode needs chunker.tau (run calibrate, or set it)"
            )
        return ChunkerConfig(
            tau=self.tau,
            l_min=self.l_min,
            l_max=self.l_max,
            hysteresis=self.hysteresis,
            budget_high=self.budget_high,
            crossfade=self.crossfade,
        )

    def policy_table(self) -> PolicyTable:
        if self.band_edges is None:
            raise ConfigError(
                "chunkwise mode needs policy.band_edges (run calibrate, or set them)"
            )
        return PolicyTable(
            band_edges=self.band_edges,
            rank_per_band=self.ranks,
            scale_per_band=self.scales,
            cache_per_band=tuple(CachePolicy.parse(t) for t in self.cache_tags),
            allow_rank_zero=self.allow_rank_zero,
        )

    def has_adapters(self) -> bool:
        return bool(self.adapter_files) or self.adapter_seed is not None


def _parse_mode(value: str) -> tuple[str, int, float]:
    v = value.strip()
    if v == MODE_CHUNKWISE:
        return MODE_CHUNKWISE, 16, 1.0
    m = _STATIC_RE.match(v)
    if m:
        return MODE_STATIC, int(m.group(1)), float(m.group(2))
    raise ConfigError(f"mode must be 'chunkwise' or 'static(R,S)', got {value!r}")


def _ints(value: str) -> tuple[int, ...]:
    return tuple(int(x.strip()) for x in value.split(","))


def _floats(value: str) -> tuple[float, ...]:
    return tuple(float(x.strip()) for x in value.split(","))


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def parse_config_items(text: str) -> dict[str, str]:
    """Raw key -> value pairs; later assignments win."""
    items: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def config_from_items(items: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    model_kwargs: dict[str, int] = {}
    estimator_kwargs: dict = {}
    updates: dict = {}
    try:
        for key, value in items.items():
            if key == "model.file":
                updates["model_file"] = value
            elif key == "model.seed":
                model_kwargs["seed"] = int(value)
            elif key in (
                "model.vocab_size", "model.d_model", "model.n_heads",
                "model.n_layers", "model.d_ff", "model.max_seq",
            ):
                model_kwargs[key.split(".", 1)[1]] = int(value)
            elif key == "adapter.files":
                updates["adapter_files"] = tuple(
                    p.strip() for p in value.split(",") if p.strip()
                )
            elif key == "adapter.seed":
                updates["adapter_seed"] = int(value)
            elif key == "adapter.r_max":
                updates["adapter_r_max"] = int(value)
            elif key == "adapter.allowed_ranks":
                updates["allowed_ranks"] = _ints(value)
            elif key == "estimator.weights":
                estimator_kwargs["weights"] = _floats(value)
            elif key == "estimator.ngram_order":
                estimator_kwargs["ngram_order"] = int(value)
            elif key == "estimator.novelty_window":
                estimator_kwargs["novelty_window"] = int(value)
            elif key == "estimator.prior_timescale":
                estimator_kwargs["prior_timescale"] = float(value)
            elif key == "chunker.l_min":
                updates["l_min"] = int(value)
            elif key == "chunker.l_max":
                updates["l_max"] = int(value)
            elif key == "chunker.tau":
                updates["tau"] = float(value)
            elif key == "chunker.hysteresis":
                updates["hysteresis"] = float(value)
            elif key == "chunker.budget_high":
                updates["budget_high"] = int(value)
            elif key == "chunker.crossfade":
                updates["crossfade"] = int(value)
            elif key == "policy.band_edges":
                updates["band_edges"] = _floats(value) if value else ()
            elif key == "policy.ranks":
                updates["ranks"] = _ints(value)
            elif key == "policy.scales":
                updates["scales"] = _floats(value)
            elif key == "policy.cache":
                updates["cache_tags"] = tuple(t.strip() for t in value.split(","))
            elif key == "policy.allow_rank_zero":
                updates["allow_rank_zero"] = _bool(value)
            elif key == "cache.sink_prefix":
                updates["sink_prefix"] = int(value)
            elif key == "mode":
                mode, rank, scale = _parse_mode(value)
                updates["mode"] = mode
                updates["static_rank"] = rank
                updates["static_scale"] = scale
            elif key == "decode.length":
                updates["decode_length"] = int(value)
            elif key == "prompt.text":
                updates["prompt"] = value.encode("utf-8")
            elif key == "prompt.hex":
                updates["prompt"] = bytes.fromhex(value)
            elif key == "prompt.file":
                with open(value, "rb") as fh:
                    updates["prompt"] = fh.read()
            elif key == "eval.hex":
                updates["eval_text"] = bytes.fromhex(value)
            elif key == "eval.file":
                with open(value, "rb") as fh:
                    updates["eval_text"] = fh.read()
            elif key == "metrics.path":
                updates["metrics_path"] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
    except (ValueError, OSError) as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from exc

    if model_kwargs:
        updates["model"] = ModelConfig(**{**_model_defaults(), **model_kwargs})
    if estimator_kwargs:
        updates["estimator"] = EstimatorConfig(**estimator_kwargs)
    return replace(cfg, **updates)


def _model_defaults() -> dict:
    d = ModelConfig()
    return {
        "vocab_size": d.vocab_size,
        "d_model": d.d_model,
        "n_heads": d.n_heads,
        "n_layers": d.n_layers,
        "d_ff": d.d_ff,
        "max_seq": d.max_seq,
        "seed": d.seed,
    }


def parse_config(text: str) -> RunConfig:
    return config_from_items(parse_config_items(text))


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def merge_config_text(base_text: str, new_items: list[tuple[str, str]]) -> str:
    """Return base config text with the given keys replaced or appended."""
    replaced = {k for k, _ in new_items}
    lines = []
    for raw in base_text.splitlines():
        stripped = raw.split("#", 1)[0].strip()
        if stripped and "=" in stripped:
            key = stripped.split("=", 1)[0].strip()
            if key in replaced:
                continue
        lines.append(raw)
    if lines and lines[-1].strip():
        lines.append("")
    lines.extend(f"{k} = {v}" for k, v in new_items)
    return "\n".join(lines) + "\n"


# -- synthetic corpus ---------------------------------------------------------


def synth_bimodal_corpus(
    seed: int,
    n_sequences: int = DEFAULT_CORPUS_SEQUENCES,
    length: int = DEFAULT_SEQUENCE_LENGTH,
    motif_len: int = MOTIF_LEN,
    low_span: int = LOW_SPAN,
    high_span: int = HIGH_SPAN,
) -> list[bytes]:
    """Alternating easy/hard byte sequences.

    Each sequence alternates a low-complexity span (a seeded motif of
    ``motif_len`` bytes repeated to ``low_span``) with a high-complexity
    span of uniform-random bytes, until ``length`` bytes are emitted.
    """
    import numpy as np

    if n_sequences < 1 or length < 1:
        raise ConfigError("corpus needs at least one sequence of at least one byte")
    rng = np.random.default_rng(seed)
    sequences = []
    for _ in range(n_sequences):
        motif = bytes(rng.integers(0, 256, size=motif_len, dtype=np.uint8))
        out = bytearray()
        low = True
        while len(out) < length:
            if low:
                reps = -(-low_span // motif_len)
                out.extend((motif * reps)[:low_span])
            else:
                out.extend(bytes(rng.integers(0, 256, size=high_span, dtype=np.uint8)))
            low = not low
        sequences.append(bytes(out[:length]))
    return sequences


def save_corpus(path: str, sequences: list[bytes]) -> None:
    """One hex-encoded sequence per line."""
    with open(path, "w", encoding="ascii") as fh:
        for seq in sequences:
            fh.write(seq.hex())
            fh.write("\n")


def load_corpus(path: str) -> list[bytes]:
    sequences = []
    try:
        with open(path, "r", encoding="ascii") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    sequences.append(bytes.fromhex(line))
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: not hex: {exc}") from exc
    except OSError as exc:
        raise FormatError(f"cannot read corpus {path}: {exc}") from exc
    if not sequences:
        raise FormatError(f"{path}: empty corpus")
    return sequences
