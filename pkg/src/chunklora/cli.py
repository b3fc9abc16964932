"""Command-line interface.

Subcommands: ``ladder`` (adapter spectrum summary), ``calibrate`` (corpus
to policy table + tau), ``decode`` (config + prompt to tokens + metrics),
``bench`` (config list to comparison report), ``gen-corpus`` (seeded
synthetic corpus).

Exit codes: 0 success, 2 configuration error, 3 input-format error,
4 runtime policy error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import adapter as ad
from . import config as cfgmod
from . import policy as policymod
from . import runtime
from .errors import (
    CapacityError,
    ChunkLoraError,
    ConfigError,
    FormatError,
    PolicyError,
    StateError,
)

EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_POLICY = 4


def _exit_code(exc: ChunkLoraError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FormatError):
        return EXIT_FORMAT
    if isinstance(exc, (PolicyError, CapacityError, StateError)):
        return EXIT_POLICY
    return 1


def _load_run_config(path: str | None) -> cfgmod.RunConfig:
    if path is None:
        return cfgmod.RunConfig()
    return cfgmod.load_config(path)


def cmd_ladder(args) -> int:
    if args.adapter:
        adapter = ad.load_adapter(args.adapter)
    else:
        if args.site is None:
            raise ConfigError("ladder needs --adapter FILE or --seed with --site L:PROJ")
        layer_str, _, proj = args.site.partition(":")
        try:
            site = ad.Site(int(layer_str), proj)
        except ValueError as exc:
            raise ConfigError(f"bad --site {args.site!r}: {exc}") from exc
        adapter = ad.synthesize_adapter(site, args.d_out, args.d_in, args.r_max, args.seed)
    ladder = ad.build_rank_ladder(adapter, tuple(int(r) for r in args.ranks.split(",")))
    print(f"site: layer {ladder.site.layer}, projection {ladder.site.proj}")
    print(f"dims: {ladder.d_out} x {ladder.d_in}")
    shown = min(len(ladder.sigma), max(ladder.allowed_ranks) + 4)
    print("singular values (leading):")
    for i, s in enumerate(ladder.sigma[:shown]):
        print(f"  sigma[{i + 1:2d}] = {s:.6e}")
    print("linearization error by rank:")
    for r in (0, *ladder.allowed_ranks, len(ladder.sigma)):
        err = ad.linearization_error(ladder, r)
        print(f"  rank {r:3d}: {err:.6e}")
    return 0


def cmd_calibrate(args) -> int:
    corpus = cfgmod.load_corpus(args.corpus)
    if args.limit:
        corpus = corpus[: args.limit]
    cfg = _load_run_config(args.config)
    scores = runtime.calibration_scores(cfg, corpus)
    table, tau = policymod.calibrate(scores)
    items = policymod.table_to_config_items(table, tau)
    base_text = ""
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            base_text = fh.read()
    out_text = cfgmod.merge_config_text(base_text, items)
    out_path = args.out or args.config
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(out_text)
        print(f"wrote calibrated config to {out_path}")
    else:
        sys.stdout.write(out_text)
    print(f"scores: {len(scores)}; edges: {table.band_edges}; tau: {tau}")
    return 0


def cmd_decode(args) -> int:
    cfg = _load_run_config(args.config)
    prompt = None
    if args.prompt is not None:
        prompt = args.prompt.encode("utf-8")
    elif args.prompt_hex is not None:
        try:
            prompt = bytes.fromhex(args.prompt_hex)
        except ValueError as exc:
            raise FormatError(f"--prompt-hex is not hex: {exc}") from exc
    if args.length is not None:
        from dataclasses import replace

        cfg = replace(cfg, decode_length=args.length)
    if args.metrics is not None:
        from dataclasses import replace

        cfg = replace(cfg, metrics_path=args.metrics)
    tokens, report = runtime.decode(cfg, prompt=prompt)
    print(f"generated {len(tokens)} tokens")
    print(f"hex: {tokens.hex()}")
    printable = tokens.decode("utf-8", errors="replace")
    print(f"text: {printable!r}")
    summary = report.summary_record()
    for key in ("adapter_macs", "peak_cache_bytes", "perplexity", "ms_per_token"):
        print(f"{key}: {summary[key]}")
    if cfg.metrics_path:
        print(f"metrics written to {cfg.metrics_path}")
    return 0


def cmd_bench(args) -> int:
    corpus = cfgmod.load_corpus(args.corpus)
    if args.limit:
        corpus = corpus[: args.limit]
    configs = [cfgmod.load_config(p) for p in args.config]
    report = runtime.bench(configs, corpus, labels=list(args.config))
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"wrote comparison report to {args.out}")
    else:
        print(text)
    return 0


def cmd_gen_corpus(args) -> int:
    sequences = cfgmod.synth_bimodal_corpus(
        seed=args.seed, n_sequences=args.sequences, length=args.length
    )
    cfgmod.save_corpus(args.out, sequences)
    print(f"wrote {len(sequences)} sequences of {args.length} bytes to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chunklora",
        description="Chunk-scheduled low-rank adapter inference runtime",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ladder", help="summarize an adapter's rank ladder")
    p.add_argument("--adapter", help="CWLA adapter file")
    p.add_argument("--seed", type=int, default=0, help="synthesize instead of loading")
    p.add_argument("--site", help="synthesis site as LAYER:PROJ, e.g. 0:q")
    p.add_argument("--d-out", type=int, default=64)
    p.add_argument("--d-in", type=int, default=64)
    p.add_argument("--r-max", type=int, default=16)
    p.add_argument("--ranks", default="4,8,16", help="allowed ranks, comma separated")
    p.set_defaults(func=cmd_ladder)

    p = sub.add_parser("calibrate", help="calibrate policy percentiles from a corpus")
    p.add_argument("--corpus", required=True, help="hex-line corpus file")
    p.add_argument("--config", help="base config to extend")
    p.add_argument("--out", help="output config path (default: rewrite --config)")
    p.add_argument("--limit", type=int, help="only use the first N sequences")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("decode", help="decode a prompt with the configured schedule")
    p.add_argument("--config", help="run config file")
    p.add_argument("--prompt", help="UTF-8 prompt text")
    p.add_argument("--prompt-hex", help="prompt bytes in hex")
    p.add_argument("--length", type=int, help="tokens to generate")
    p.add_argument("--metrics", help="metrics JSONL output path")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="compare configs over one corpus")
    p.add_argument("--config", action="append", required=True, help="repeatable")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--limit", type=int, help="only use the first N sequences")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-corpus", help="generate the synthetic bimodal corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequences", type=int, default=cfgmod.DEFAULT_CORPUS_SEQUENCES)
    p.add_argument("--length", type=int, default=cfgmod.DEFAULT_SEQUENCE_LENGTH)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ChunkLoraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
