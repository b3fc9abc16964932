"""Deterministic byte-vocabulary decoder-only transformer.

The frozen base path for the runtime: pre-norm blocks with RMS
normalization, SiLU MLP, learned absolute position embeddings, causal
attention through an external :class:`~chunklora.kvcache.KvStore`, and
per-head attention-weight export for the complexity estimator.

Activations are float32 with float64 accumulation inside reductions
(norm statistics, softmax); weights are float32 and read-only after
construction. Decoding is greedy argmax with lowest-index tie-break.

Weight initialization contract (reproducible by seed): a single
``numpy.random.default_rng(seed)`` draws standard normals scaled by 0.02,
cast to float32, in file order: token embedding, position embedding, then
per layer q/k/v/o/up/down projections, then the output head.
Normalization gains start at 1 and are not drawn.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .adapter import PROJECTIONS, ActiveAdapterSet, Site
from .errors import CapacityError, ConfigError, FormatError
from .kvcache import KvStore

WEIGHT_INIT_STD = 0.02
MODEL_MAGIC = b"CWLM"
MODEL_VERSION = 1
RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_seq: int = 512
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def projection_dims(cfg: ModelConfig, proj: str) -> tuple[int, int]:
    """(d_out, d_in) of the named projection; adapters must match these."""
    if proj in ("q", "k", "v", "o"):
        return cfg.d_model, cfg.d_model
    if proj == "up":
        return cfg.d_ff, cfg.d_model
    if proj == "down":
        return cfg.d_model, cfg.d_ff
    raise ConfigError(f"unknown projection kind {proj!r}")


def adapter_sites(cfg: ModelConfig) -> list[Site]:
    """Every addressable adapter site, in layer-major order."""
    return [Site(layer, proj) for layer in range(cfg.n_layers) for proj in PROJECTIONS]


@dataclass
class LayerWeights:
    ln_attn: np.ndarray   # (d_model,)
    wq: np.ndarray        # (d_model, d_model)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln_mlp: np.ndarray    # (d_model,)
    w_up: np.ndarray      # (d_ff, d_model)
    w_down: np.ndarray    # (d_model, d_ff)


@dataclass
class ModelWeights:
    cfg: ModelConfig
    tok_emb: np.ndarray   # (vocab_size, d_model)
    pos_emb: np.ndarray   # (max_seq, d_model)
    layers: list[LayerWeights] = field(default_factory=list)
    ln_final: np.ndarray = None
    w_head: np.ndarray = None  # (vocab_size, d_model)

    def arrays(self):
        """All weight matrices in declared (file) order."""
        yield self.tok_emb
        yield self.pos_emb
        for lw in self.layers:
            yield lw.ln_attn
            yield lw.wq
            yield lw.wk
            yield lw.wv
            yield lw.wo
            yield lw.ln_mlp
            yield lw.w_up
            yield lw.w_down
        yield self.ln_final
        yield self.w_head

    def freeze(self) -> "ModelWeights":
        for arr in self.arrays():
            arr.flags.writeable = False
        return self


def _array_shapes(cfg: ModelConfig):
    d, ff, v, s = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_seq
    layer = [(d,), (d, d), (d, d), (d, d), (d, d), (d,), (ff, d), (d, ff)]
    return [(v, d), (s, d)] + layer * cfg.n_layers + [(d,), (v, d)]


def init_model(cfg: ModelConfig) -> ModelWeights:
    """Seeded deterministic weights; identical seed gives bit-identical arrays."""
    rng = np.random.default_rng(cfg.seed)

    def draw(*shape):
        return (rng.standard_normal(shape) * WEIGHT_INIT_STD).astype(np.float32)

    def gain():
        return np.ones(cfg.d_model, dtype=np.float32)

    tok_emb = draw(cfg.vocab_size, cfg.d_model)
    pos_emb = draw(cfg.max_seq, cfg.d_model)
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            LayerWeights(
                ln_attn=gain(),
                wq=draw(cfg.d_model, cfg.d_model),
                wk=draw(cfg.d_model, cfg.d_model),
                wv=draw(cfg.d_model, cfg.d_model),
                wo=draw(cfg.d_model, cfg.d_model),
                ln_mlp=gain(),
                w_up=draw(cfg.d_ff, cfg.d_model),
                w_down=draw(cfg.d_model, cfg.d_ff),
            )
        )
    return ModelWeights(
        cfg=cfg,
        tok_emb=tok_emb,
        pos_emb=pos_emb,
        layers=layers,
        ln_final=gain(),
        w_head=draw(cfg.vocab_size, cfg.d_model),
    ).freeze()


def new_cache(cfg: ModelConfig, sink_prefix: int = 4) -> KvStore:
    return KvStore(cfg.n_layers, cfg.n_heads, cfg.d_head, sink_prefix=sink_prefix)


@dataclass
class StepOutput:
    logits: np.ndarray                     # (vocab_size,) float32
    attn_weights: list[list[np.ndarray]]   # [layer][head], dense over 0..pos


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = float(np.mean(x.astype(np.float64) ** 2))
    inv = np.float32(1.0 / np.sqrt(ms + RMS_EPS))
    return x * inv * gain


def _silu(x: np.ndarray) -> np.ndarray:
    # x * sigmoid(x), with sigmoid in its tanh form for overflow safety
    return x * (np.float32(0.5) * (np.tanh(np.float32(0.5) * x) + np.float32(1.0)))


def forward_step(
    weights: ModelWeights,
    token: int,
    cache: KvStore,
    adapters: ActiveAdapterSet,
) -> StepOutput:
    """Process one token at the cache's next position.

    Appends this step's keys/values to the cache and returns next-token
    logits plus each head's attention distribution over cached positions.
    Adapter contributions are added on projection outputs; an empty
    adapter set reproduces the frozen base path exactly.
    """
    cfg = weights.cfg
    pos = cache.seq_len
    if pos >= cfg.max_seq:
        raise CapacityError(f"sequence length {pos} at max_seq {cfg.max_seq}")
    if not 0 <= token < cfg.vocab_size:
        raise ConfigError(f"token {token} outside vocabulary")

    d_head = cfg.d_head
    inv_sqrt = np.float32(1.0 / np.sqrt(d_head))
    x = weights.tok_emb[token] + weights.pos_emb[pos]

    attn_export: list[list[np.ndarray]] = []
    for li, lw in enumerate(weights.layers):
        h = _rms_norm(x, lw.ln_attn)
        q = _project(lw.wq, h, adapters, Site(li, "q"))
        k = _project(lw.wk, h, adapters, Site(li, "k"))
        v = _project(lw.wv, h, adapters, Site(li, "v"))

        head_ctx = np.empty(cfg.d_model, dtype=np.float32)
        layer_export = []
        for hi in range(cfg.n_heads):
            lo = hi * d_head
            sl = slice(lo, lo + d_head)
            cache.append(li, hi, k[sl], v[sl])
            ctx, _, positions, wts = cache.attend_detail(li, hi, q[sl] * inv_sqrt, pos)
            head_ctx[sl] = ctx
            dense = np.zeros(pos + 1)
            dense[positions] = wts
            layer_export.append(dense)
        attn_export.append(layer_export)

        o = _project(lw.wo, head_ctx, adapters, Site(li, "o"))
        x = x + o

        h2 = _rms_norm(x, lw.ln_mlp)
        up = _project(lw.w_up, h2, adapters, Site(li, "up"))
        act = _silu(up)
        down = _project(lw.w_down, act, adapters, Site(li, "down"))
        x = x + down

    final = _rms_norm(x, weights.ln_final)
    logits = weights.w_head @ final
    return StepOutput(logits=logits, attn_weights=attn_export)


def _project(w: np.ndarray, x: np.ndarray, adapters: ActiveAdapterSet, site: Site) -> np.ndarray:
    out = w @ x
    extra = adapters.contribution(site, x)
    if extra is not None:
        out = out + extra.astype(np.float32)
    return out


def greedy_token(logits: np.ndarray) -> int:
    """Argmax with deterministic lowest-index tie-break."""
    return int(np.argmax(logits))


# -- weight file ------------------------------------------------------------

_HEADER_FMT = "<4sIIIIIIIq"  # magic, version, 6 config counts, seed


def save_model(path: str, weights: ModelWeights) -> None:
    """Write the documented little-endian weight file (float32 matrices)."""
    cfg = weights.cfg
    header = struct.pack(
        _HEADER_FMT,
        MODEL_MAGIC,
        MODEL_VERSION,
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_heads,
        cfg.n_layers,
        cfg.d_ff,
        cfg.max_seq,
        cfg.seed,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in weights.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path: str) -> ModelWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    head_size = struct.calcsize(_HEADER_FMT)
    if len(blob) < head_size:
        raise FormatError(f"{path}: truncated model header")
    magic, version, vocab, d_model, n_heads, n_layers, d_ff, max_seq, seed = struct.unpack(
        _HEADER_FMT, blob[:head_size]
    )
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        cfg = ModelConfig(vocab, d_model, n_heads, n_layers, d_ff, max_seq, seed)
    except ConfigError as exc:
        raise FormatError(f"{path}: invalid config block: {exc}") from exc

    shapes = _array_shapes(cfg)
    expect = head_size + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) != expect:
        raise FormatError(f"{path}: expected {expect} bytes, got {len(blob)}")

    offset = head_size
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        arrays.append(arr.reshape(shape).copy())
        offset += 4 * count

    it = iter(arrays)
    tok_emb = next(it)
    pos_emb = next(it)
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(LayerWeights(*(next(it) for _ in range(8))))
    ln_final = next(it)
    w_head = next(it)
    return ModelWeights(cfg, tok_emb, pos_emb, layers, ln_final, w_head).freeze()
