"""Deterministic stand-in for model math.

Output tokens are derived from the KV bytes themselves: after prefill the
running state folds in a CRC of every layer's KV for the whole context, and
each decode step folds in the new token's KV. An engine that loads a single
wrong byte from the cache therefore produces different tokens, which makes
"outputs equal a cache-free run" a byte-level check.
"""

from __future__ import annotations

import zlib

import numpy as np

from ..kv import ModelSpec, synth_kv

_MASK = (1 << 64) - 1
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_GOLD = 0x9E3779B97F4A7C15


def mix64(x: int) -> int:
    x &= _MASK
    x ^= x >> 30
    x = (x * _M1) & _MASK
    x ^= x >> 27
    x = (x * _M2) & _MASK
    return x ^ (x >> 31)


def fold_layer(state: int, layer: int, crc: int) -> int:
    return mix64(state ^ ((crc << 16) | layer) ^ _GOLD)


def fold_layers(state: int, crcs) -> int:
    for layer, crc in enumerate(crcs):
        state = fold_layer(state, layer, crc)
    return state


def layer_crc(kv: np.ndarray) -> int:
    return zlib.crc32(memoryview(np.ascontiguousarray(kv)).cast("B"))


def next_token(state: int, step: int, vocab: int) -> int:
    return mix64(state ^ ((step + 1) * _GOLD)) % vocab


def token_kv(model: ModelSpec, token: int, position: int, layer: int) -> np.ndarray:
    return synth_kv(np.array([token]), np.array([position]), layer, model.bytes_per_token_per_layer)


def context_state(model: ModelSpec, tokens) -> int:
    """State after prefilling ``tokens`` with freshly computed KV."""
    tokens = np.asarray(tokens, dtype=np.uint64)
    pos = np.arange(len(tokens), dtype=np.uint64)
    crcs = [layer_crc(synth_kv(tokens, pos, layer, model.bytes_per_token_per_layer))
            for layer in range(model.num_layers)]
    return fold_layers(0, crcs)


def reference_generate(tokens, n_out: int, model: ModelSpec, vocab: int) -> list[int]:
    """Output tokens of a cache-free run, computed without an engine."""
    if n_out <= 0:
        return []
    state = context_state(model, tokens)
    out = [next_token(state, 0, vocab)]
    pos = len(tokens)
    for k in range(1, n_out):
        crcs = [layer_crc(token_kv(model, out[-1], pos, layer)) for layer in range(model.num_layers)]
        state = fold_layers(state, crcs)
        out.append(next_token(state, k, vocab))
        pos += 1
    return out
