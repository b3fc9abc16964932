"""Low-rank adapter bank: trained factors, rank ladder, sliced application.

Each adapter attaches to one projection site of the model and stores the
usual pair of factors (down: r_max x d_in, up: d_out x r_max). The rank
ladder is the SVD of the dense update ``up @ down``, built once per site;
slicing it to an effective rank is an index operation, and application is
always factored (the truncated dense matrix is never materialized), so a
rank-r apply costs 2*r*(d_in + d_out) multiply-accumulates.

Ladders and settings are immutable after construction; ``apply`` and
``blend_apply`` are pure functions and safe to call from concurrent
streams.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import linalg
from .errors import FormatError, PolicyError, RangeError, ShapeError

PROJECTIONS = ("q", "k", "v", "o", "up", "down")
DEFAULT_ALLOWED_RANKS = (4, 8, 16)

# Synthesized factor spectra: leading singular value and geometric decay.
# Small enough to behave like a fine-tuning update, decaying fast enough
# that rank slicing is non-trivial.
SYNTH_SIGMA0 = 0.05
SYNTH_DECAY = 0.6

ADAPTER_MAGIC = b"CWLA"
ADAPTER_VERSION = 1


class Site(NamedTuple):
    """Adapter attachment point: (layer index, projection kind)."""

    layer: int
    proj: str


def check_site(site: Site) -> Site:
    if site.layer < 0:
        raise RangeError(f"negative layer index {site.layer}")
    if site.proj not in PROJECTIONS:
        raise PolicyError(f"unknown projection kind {site.proj!r}")
    return site


@dataclass(frozen=True)
class LoraAdapter:
    """Trained (or synthesized) low-rank factors for one site."""

    site: Site
    down: np.ndarray  # (r_max, d_in)
    up: np.ndarray    # (d_out, r_max)
    trained_rank: int

    def __post_init__(self):
        check_site(self.site)
        if self.down.ndim != 2 or self.up.ndim != 2:
            raise ShapeError("adapter factors must be 2-D")
        if self.up.shape[1] != self.down.shape[0]:
            raise ShapeError(
                f"factor inner dims disagree: up {self.up.shape}, down {self.down.shape}"
            )
        if self.trained_rank > min(self.d_out, self.d_in):
            raise RangeError("trained_rank exceeds site dimensions")

    @property
    def d_in(self) -> int:
        return int(self.down.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.up.shape[0])

    def delta(self) -> np.ndarray:
        """Dense update up @ down. For oracles and ladder construction only."""
        return linalg.matmul(self.up, self.down)


@dataclass(frozen=True)
class RankLadder:
    """SVD of a site's dense update, sliceable to any allowed rank."""

    site: Site
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    allowed_ranks: tuple[int, ...] = DEFAULT_ALLOWED_RANKS

    def __post_init__(self):
        if any(r <= 0 for r in self.allowed_ranks):
            raise RangeError("allowed ranks must be positive")
        if tuple(sorted(self.allowed_ranks)) != tuple(self.allowed_ranks):
            raise RangeError("allowed ranks must be ascending")
        if max(self.allowed_ranks) > len(self.sigma):
            raise RangeError("allowed rank exceeds spectrum length")

    @property
    def d_out(self) -> int:
        return int(self.u.shape[0])

    @property
    def d_in(self) -> int:
        return int(self.v.shape[0])


@dataclass(frozen=True)
class ChunkAdapterSetting:
    """Per-chunk effective rank and gating scale."""

    rank: int
    scale: float

    def __post_init__(self):
        if self.rank < 0:
            raise RangeError(f"negative rank {self.rank}")
        if not 0.0 <= self.scale <= 1.0:
            raise RangeError(f"scale {self.scale} outside [0, 1]")


def synthesize_adapter(site: Site, d_out: int, d_in: int, r_max: int, seed: int) -> LoraAdapter:
    """Seeded stand-in for a trained adapter with a strictly decaying spectrum.

    Two Gaussian factor matrices are orthonormalized and joined through a
    geometric singular-value ladder, so the synthesized update has exact
    rank r_max and every truncation below it discards real energy.
    """
    check_site(site)
    if r_max < 1:
        raise RangeError("r_max must be at least 1")
    if r_max > min(d_out, d_in):
        raise RangeError(f"r_max {r_max} exceeds site dims ({d_out}x{d_in})")
    rng = np.random.default_rng(seed)
    gu, _ = np.linalg.qr(rng.standard_normal((d_out, r_max)))
    gv, _ = np.linalg.qr(rng.standard_normal((d_in, r_max)))
    spectrum = SYNTH_SIGMA0 * (SYNTH_DECAY ** np.arange(r_max))
    return LoraAdapter(site=site, down=gv.T.copy(), up=gu * spectrum, trained_rank=r_max)


def build_rank_ladder(
    adapter: LoraAdapter,
    allowed_ranks: tuple[int, ...] = DEFAULT_ALLOWED_RANKS,
) -> RankLadder:
    """Factor the dense update once. Callers cache the result per site."""
    result = linalg.svd(adapter.delta())
    return RankLadder(
        site=adapter.site,
        u=result.u,
        sigma=result.sigma,
        v=result.v,
        allowed_ranks=tuple(allowed_ranks),
    )


def _check_rank(ladder: RankLadder, rank: int) -> None:
    if rank != 0 and rank not in ladder.allowed_ranks:
        raise PolicyError(
            f"rank {rank} not in allowed set {ladder.allowed_ranks} (0 = adapter off)"
        )


def apply(ladder: RankLadder, setting: ChunkAdapterSetting, x: np.ndarray) -> np.ndarray:
    """Gated truncated application ``scale * U_r diag(sigma_r) V_r^T x``.

    Computed factored in O(r * (d_in + d_out)); rank 0 or scale 0 yield an
    exact zero vector without touching the factors.
    """
    _check_rank(ladder, setting.rank)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (ladder.d_in,):
        raise ShapeError(f"input length {x.shape} does not match d_in {ladder.d_in}")
    if setting.rank == 0 or setting.scale == 0.0:
        return np.zeros(ladder.d_out)
    r = setting.rank
    t = ladder.v[:, :r].T @ x
    t *= ladder.sigma[:r]
    y = ladder.u[:, :r] @ t
    y *= setting.scale
    return y


def blend_apply(
    ladder: RankLadder,
    outgoing: ChunkAdapterSetting,
    incoming: ChunkAdapterSetting,
    lam: float,
    x: np.ndarray,
) -> np.ndarray:
    """Cross-fade: ``lam * apply(outgoing, x) + (1 - lam) * apply(incoming, x)``."""
    if not 0.0 <= lam <= 1.0:
        raise RangeError(f"blend weight {lam} outside [0, 1]")
    return lam * apply(ladder, outgoing, x) + (1.0 - lam) * apply(ladder, incoming, x)


def linearization_error(ladder: RankLadder, rank: int) -> float:
    """Frobenius norm of the spectrum tail discarded by a rank-r slice."""
    if rank < 0 or rank > len(ladder.sigma):
        raise RangeError(f"rank {rank} outside [0, {len(ladder.sigma)}]")
    tail = ladder.sigma[rank:]
    return float(np.sqrt(np.sum(tail * tail)))


def mac_cost(rank: int, d_in: int, d_out: int) -> int:
    """Modeled multiply-accumulate count of one factored rank-r application."""
    return 2 * rank * (d_in + d_out)


@dataclass
class SiteActivation:
    """What one site currently applies: a setting, optionally fading from another."""

    ladder: RankLadder
    setting: ChunkAdapterSetting
    outgoing: ChunkAdapterSetting | None = None
    fade_lambda: float = 0.0


class ActiveAdapterSet:
    """Per-stream map of site -> activation, with a running cost tally.

    ``contribution`` returns None when a site has nothing to add (no
    activation, or rank/scale gated to zero), which lets the model skip
    the addition entirely and reproduce the frozen base path bit for bit.
    Multiply-accumulates are tallied for every factored application that
    actually runs, including both sides of a cross-fade.
    """

    def __init__(self):
        self._sites: dict[Site, SiteActivation] = {}
        self.mac_count: int = 0

    def __len__(self) -> int:
        return len(self._sites)

    def activate(
        self,
        ladder: RankLadder,
        setting: ChunkAdapterSetting,
        outgoing: ChunkAdapterSetting | None = None,
        fade_lambda: float = 0.0,
    ) -> None:
        self._sites[ladder.site] = SiteActivation(ladder, setting, outgoing, fade_lambda)

    def clear(self) -> None:
        self._sites.clear()

    @staticmethod
    def _live(setting: ChunkAdapterSetting) -> bool:
        return setting.rank > 0 and setting.scale != 0.0

    def contribution(self, site: Site, x: np.ndarray) -> np.ndarray | None:
        act = self._sites.get(site)
        if act is None:
            return None
        ladder = act.ladder
        if act.outgoing is None:
            if not self._live(act.setting):
                return None
            self.mac_count += mac_cost(act.setting.rank, ladder.d_in, ladder.d_out)
            return apply(ladder, act.setting, x)
        for side in (act.outgoing, act.setting):
            if self._live(side):
                self.mac_count += mac_cost(side.rank, ladder.d_in, ladder.d_out)
        return blend_apply(ladder, act.outgoing, act.setting, act.fade_lambda, x)


_PROJ_INDEX = {name: i for i, name in enumerate(PROJECTIONS)}


def save_adapter(path: str, adapter: LoraAdapter) -> None:
    """Write the documented little-endian adapter file (factors as float32)."""
    r_max = adapter.up.shape[1]
    header = struct.pack(
        "<4sIIIIII",
        ADAPTER_MAGIC,
        ADAPTER_VERSION,
        adapter.site.layer,
        _PROJ_INDEX[adapter.site.proj],
        adapter.d_out,
        adapter.d_in,
        r_max,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(adapter.down, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(adapter.up, dtype="<f4").tobytes())


def load_adapter(path: str) -> LoraAdapter:
    with open(path, "rb") as fh:
        blob = fh.read()
    head_size = struct.calcsize("<4sIIIIII")
    if len(blob) < head_size:
        raise FormatError(f"{path}: truncated adapter header")
    magic, version, layer, proj_idx, d_out, d_in, r_max = struct.unpack(
        "<4sIIIIII", blob[:head_size]
    )
    if magic != ADAPTER_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != ADAPTER_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if proj_idx >= len(PROJECTIONS):
        raise FormatError(f"{path}: unknown projection index {proj_idx}")
    down_n = r_max * d_in
    up_n = d_out * r_max
    expect = head_size + 4 * (down_n + up_n)
    if len(blob) != expect:
        raise FormatError(f"{path}: expected {expect} bytes, got {len(blob)}")
    down = np.frombuffer(blob, dtype="<f4", count=down_n, offset=head_size)
    up = np.frombuffer(blob, dtype="<f4", count=up_n, offset=head_size + 4 * down_n)
    return LoraAdapter(
        site=Site(layer, PROJECTIONS[proj_idx]),
        down=down.astype(np.float64).reshape(r_max, d_in),
        up=up.astype(np.float64).reshape(d_out, r_max),
        trained_rank=r_max,
    )
