"""Chunk-scheduled low-rank adapter inference runtime.

Decoding partitions the token stream online into variable-length chunks
by estimated token complexity; each chunk activates a sliced low-rank
adapter (effective rank plus gating scale) and a key/value cache policy,
with linear cross-fades at chunk boundaries. A benchmark harness compares
this schedule against static-rank adapters.
"""

__version__ = "0.1.0"
