"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines and the measured margins.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from chunklora import adapter as ad
from chunklora import runtime as rt
from chunklora import toymodel as tm
from chunklora.chunker import Chunker, ChunkerConfig
from chunklora.complexity import EstimatorConfig, attention_proxy, entropy_norm, positional_prior
from chunklora.config import MODE_STATIC, RunConfig, synth_bimodal_corpus
from chunklora.kvcache import FULL, CachePolicy, KvStore
from chunklora.linalg import frobenius
from chunklora.policy import calibrate

MODEL = tm.ModelConfig(seed=42)
SITE_DIMS = {p: tm.projection_dims(MODEL, p) for p in ad.PROJECTIONS}


def report_pass(n: int, detail: str) -> None:
    print(f"\nACCEPTANCE {n} PASS: {detail}")


@pytest.fixture(scope="module")
def bimodal():
    """Calibrated chunkwise and static sessions over one shared corpus."""
    corpus = synth_bimodal_corpus(seed=11, n_sequences=10, length=256)
    base = RunConfig(model=MODEL, adapter_seed=7)
    table, tau = calibrate(rt.calibration_scores(base, corpus[:2]))
    chunkwise_cfg = replace(base, tau=tau, band_edges=table.band_edges)
    static_cfg = replace(base, mode=MODE_STATIC, static_rank=16, static_scale=1.0)
    return {
        "corpus": corpus[2:],
        "chunkwise": rt.build_session(chunkwise_cfg),
        "static": rt.build_session(static_cfg),
    }


def test_criterion_1_eckart_young_suite():
    """Slice error equals the spectrum tail for 50 seeded adapters, < 10 s."""
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    count = 0
    worst = 0.0
    while count < 50:
        for proj in ad.PROJECTIONS:
            if count >= 50:
                break
            layer = count % MODEL.n_layers
            d_out, d_in = SITE_DIMS[proj]
            adapter = ad.synthesize_adapter(
                ad.Site(layer, proj), d_out, d_in, 16, seed=int(rng.integers(1 << 30))
            )
            ladder = ad.build_rank_ladder(adapter)
            dense = adapter.delta()
            scale = max(1.0, frobenius(dense))
            for r in (0, 4, 8, 16, len(ladder.sigma)):
                slice_ = (ladder.u[:, :r] * ladder.sigma[:r]) @ ladder.v[:, :r].T
                err = frobenius(dense - slice_)
                tail = float(np.sqrt(np.sum(ladder.sigma[r:] ** 2)))
                gap = abs(err - tail) / scale
                worst = max(worst, gap)
                assert gap <= 1e-8
            count += 1
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    report_pass(1, f"50 adapters x 5 ranks, worst relative gap {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_static_collapse():
    """Degenerate chunkwise config is bit-identical to static mode, < 60 s."""
    start = time.perf_counter()
    base = RunConfig(model=MODEL, adapter_seed=7)
    static_cfg = replace(base, mode=MODE_STATIC, static_rank=16, static_scale=1.0)
    degenerate_cfg = replace(
        base,
        tau=0.5,
        band_edges=(),
        ranks=(16,),
        scales=(1.0,),
        cache_tags=("full",),
        crossfade=0,
    )
    static_session = rt.build_session(static_cfg)
    degenerate_session = rt.build_session(degenerate_cfg)

    rng = np.random.default_rng(2)
    for i in range(20):
        prompt = bytes(rng.integers(0, 256, size=256, dtype=np.uint8))
        t_static, _ = rt.run_stream(static_session, prompt, 32)
        t_degen, _ = rt.run_stream(degenerate_session, prompt, 32)
        assert t_static == t_degen, f"token stream diverged on prompt {i}"
        ppl_static = rt.teacher_forced_report(static_session, prompt).perplexity
        ppl_degen = rt.teacher_forced_report(degenerate_session, prompt).perplexity
        assert ppl_static == ppl_degen, f"perplexity diverged on prompt {i}"
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    report_pass(2, f"20 prompts x 256 bytes, streams and PPL identical, {elapsed:.1f}s")


def test_criterion_3_adapter_off_collapse():
    """Scale 0 everywhere reproduces the frozen base model bitwise."""
    base_session = rt.build_session(RunConfig(model=MODEL, mode=MODE_STATIC))
    off_session = rt.build_session(
        RunConfig(model=MODEL, adapter_seed=7, mode=MODE_STATIC, static_scale=0.0)
    )
    rng = np.random.default_rng(3)
    for _ in range(5):
        prompt = bytes(rng.integers(0, 256, size=64, dtype=np.uint8))
        t_base, _ = rt.run_stream(base_session, prompt, 64)
        t_off, report = rt.run_stream(off_session, prompt, 64)
        assert t_base == t_off
        assert report.adapter_macs == 0
    report_pass(3, "5 prompts, zero-scale streams match the base model bitwise")


def test_criterion_4_chunk_partition_suite():
    """1000 random traces: tiling, length bounds, online/replay agreement."""
    rng = np.random.default_rng(4)
    cfg = ChunkerConfig(tau=0.5, l_min=8, l_max=64)
    for _ in range(1000):
        trace = rng.random(256)

        def run(scores):
            chunker = Chunker(cfg)
            closed = [c for s in scores if (c := chunker.observe(float(s)))]
            tail = chunker.flush()
            if tail:
                closed.append(tail)
            return closed

        online = run(trace)
        assert online[0].start == 0
        assert online[-1].end == 256
        for a, b in zip(online, online[1:]):
            assert a.end == b.start
        assert all(len(c) <= cfg.l_max for c in online)
        assert all(len(c) >= cfg.l_min for c in online[:-1])
        replay = run(trace)
        assert [(c.start, c.end) for c in online] == [(c.start, c.end) for c in replay]
    report_pass(4, "1000 traces x 256 tokens partition cleanly, online == replay")


def test_criterion_5_quantization_bound_and_full_exactness():
    """INT8 round trip bounded elementwise; FULL attend matches the oracle bitwise."""
    rng = np.random.default_rng(5)
    worst_margin = 0.0
    for _ in range(100):
        store = KvStore(1, 1, 16, sink_prefix=0)
        n = int(rng.integers(4, 32))
        ks = [rng.standard_normal(16).astype(np.float32) * float(rng.uniform(0.1, 3)) for _ in range(n)]
        vs = [rng.standard_normal(16).astype(np.float32) for _ in range(n)]
        for k, v in zip(ks, vs):
            store.append(0, 0, k, v)
        store.seal_span(0, n, CachePolicy(int8=True))
        span = store._heads[0][0].spans[0]
        for block, ref in ((span.keys_f64(), ks), (span.values_f64(), vs)):
            ref = np.stack(ref)
            bound = np.max(np.abs(ref)) / 254.0 + 1e-7
            err = float(np.max(np.abs(block - ref)))
            assert err <= bound
            worst_margin = max(worst_margin, err / bound)

    # FULL-policy attention: bitwise against a from-scratch softmax
    store = KvStore(1, 1, 16)
    ks = [rng.standard_normal(16).astype(np.float32) for _ in range(24)]
    vs = [rng.standard_normal(16).astype(np.float32) for _ in range(24)]
    for k, v in zip(ks, vs):
        store.append(0, 0, k, v)
    store.seal_span(0, 12, FULL)
    q = rng.standard_normal(16).astype(np.float32)
    ctx, _ = store.attend(0, 0, q, 23)
    scores = np.stack(ks).astype(np.float64) @ q.astype(np.float64)
    scores -= scores.max()
    w = np.exp(scores)
    w /= w.sum()
    want = (w @ np.stack(vs).astype(np.float64)).astype(np.float32)
    assert np.array_equal(ctx, want)
    report_pass(5, f"100 spans within int8 bound (worst at {worst_margin:.0%} of it); FULL bitwise")


def test_criterion_6_mac_reduction(bimodal):
    """Chunkwise cuts modeled adapter MACs >= 25% vs static(16, 1.0)."""
    from test_runtime import schedule_mac_oracle

    cw_total = 0
    st_total = 0
    for seq in bimodal["corpus"]:
        cw_report = rt.teacher_forced_report(bimodal["chunkwise"], seq)
        st_report = rt.teacher_forced_report(bimodal["static"], seq)
        assert cw_report.adapter_macs == schedule_mac_oracle(cw_report, MODEL)
        assert st_report.adapter_macs == schedule_mac_oracle(st_report, MODEL)
        cw_total += cw_report.adapter_macs
        st_total += st_report.adapter_macs
    reduction = 1.0 - cw_total / st_total
    assert reduction >= 0.25
    report_pass(6, f"modeled adapter MACs reduced {reduction:.1%} (floor 25%)")


def test_criterion_7_memory_reduction(bimodal):
    """Peak cache bytes under chunkwise <= 70% of static FULL."""
    cw_peak = 0
    st_peak = 0
    for seq in bimodal["corpus"]:
        cw_peak = max(cw_peak, rt.teacher_forced_report(bimodal["chunkwise"], seq).peak_cache_bytes)
        st_peak = max(st_peak, rt.teacher_forced_report(bimodal["static"], seq).peak_cache_bytes)
    ratio = cw_peak / st_peak
    assert ratio <= 0.70
    # the static peak must equal the exact FULL accounting for 256 tokens
    mcfg = MODEL
    expected_static = 2 * mcfg.n_layers * mcfg.n_heads * 256 * mcfg.d_head * 4
    assert st_peak == expected_static
    report_pass(7, f"peak cache at {ratio:.1%} of static FULL (ceiling 70%)")


def test_criterion_8_perplexity_parity(bimodal):
    """Chunkwise PPL within 5% of static; slice deviation obeys the tail bound."""
    nll = {"chunkwise": 0.0, "static": 0.0}
    count = 0
    for seq in bimodal["corpus"]:
        for name in ("chunkwise", "static"):
            rep = rt.teacher_forced_report(bimodal[name], seq)
            nll[name] += np.log(rep.perplexity) * (len(seq) - 1)
        count += len(seq) - 1
    ppl_cw = float(np.exp(nll["chunkwise"] / count))
    ppl_st = float(np.exp(nll["static"] / count))
    rel = abs(ppl_cw - ppl_st) / ppl_st
    assert rel <= 0.05

    # operator-norm check on the ladders actually used by the session
    rng = np.random.default_rng(8)
    for ladder in bimodal["chunkwise"].ladders.values():
        for r in (4, 8, 16):
            bound = ad.linearization_error(ladder, r)
            dense_u = ladder.u * ladder.sigma
            for _ in range(3):
                x = rng.standard_normal(ladder.d_in)
                sliced = ad.apply(ladder, ad.ChunkAdapterSetting(r, 1.0), x)
                dense = dense_u @ (ladder.v.T @ x)
                gap = float(np.linalg.norm(sliced - dense))
                assert gap <= bound * float(np.linalg.norm(x)) + 1e-9
    report_pass(8, f"PPL {ppl_cw:.2f} vs {ppl_st:.2f} ({rel:.2%} apart, cap 5%); tail bound holds")


def test_criterion_9_estimator_analytic_cases():
    """The closed-form estimator values hold exactly."""
    cfg = EstimatorConfig()
    assert entropy_norm(np.zeros(256)) == pytest.approx(1.0, abs=1e-12)
    spiked = np.zeros(256)
    spiked[9] = 1e6
    assert entropy_norm(spiked) == pytest.approx(0.0, abs=1e-6)
    two = np.full(256, -1e6)
    two[1] = two[2] = 0.0
    assert entropy_norm(two) == pytest.approx(0.125, abs=1e-9)
    assert positional_prior(0, cfg) == 1.0
    assert positional_prior(64, cfg) == pytest.approx(np.exp(-1.0), abs=1e-12)
    here = np.zeros(9)
    here[8] = 1.0
    assert attention_proxy([here], 8) == 0.0
    far = np.zeros(9)
    far[0] = 1.0
    assert attention_proxy([far], 8) == 1.0
    uniform = np.full(9, 1.0 / 9.0)
    assert attention_proxy([uniform], 8) == pytest.approx(0.5, abs=1e-12)
    report_pass(9, "entropy 1/0/ln2-ratio, prior e^-1, proxy 0/1/0.5 all exact")


def test_criterion_10_determinism(bimodal, tmp_path):
    """Repeated decode and bench yield byte-identical records modulo wall clock."""

    def strip_wall(rec: dict) -> dict:
        return {k: v for k, v in rec.items() if k not in rt.WALL_CLOCK_FIELDS}

    prompt = b"determinism criterion"
    runs = []
    for _ in range(2):
        _, report = rt.run_stream(bimodal["chunkwise"], prompt, 64)
        runs.append("\n".join(json.dumps(strip_wall(r), sort_keys=True) for r in report.records()))
    assert runs[0] == runs[1]

    bench_runs = []
    cw_cfg = bimodal["chunkwise"].cfg
    st_cfg = bimodal["static"].cfg
    corpus = bimodal["corpus"][:2]
    for _ in range(2):
        report = rt.bench([st_cfg, cw_cfg], corpus, labels=["static", "chunkwise"])
        for row in report["configs"]:
            row.pop("ms_per_token")
        for row in report["deltas_vs_first"]:
            row.pop("ms_per_token_ratio")
        bench_runs.append(json.dumps(report, sort_keys=True))
    assert bench_runs[0] == bench_runs[1]
    report_pass(10, "decode and bench records byte-identical except wall-clock fields")
