"""Rotary position encoding and attention over NoPE-stored keys.

Keys are stored without rotation. ``attention_fused`` rotates each tile of
keys to its absolute position right before scoring, so the same stored
bytes serve a chunk at any offset. ``attention_pre_applied`` is the
conventional path where keys were rotated before being written.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from chunkkv.errors import DimensionMismatch, EmptyValidSet
from chunkkv.kvpage import KvPage, resolve_dtype


@dataclass(frozen=True)
class AttnConfig:
    d_head: int = 64
    rope_base: float = 10000.0
    dtype: str = "f32"

    def __post_init__(self) -> None:
        if self.d_head <= 0 or self.d_head % 2:
            raise DimensionMismatch(f"d_head must be a positive even integer, got {self.d_head}")
        if self.rope_base <= 0:
            raise ValueError(f"rope_base must be positive, got {self.rope_base}")
        resolve_dtype(self.dtype)

    @property
    def np_dtype(self) -> np.dtype:
        return resolve_dtype(self.dtype)

    @property
    def atol(self) -> float:
        return 1e-5 if self.dtype == "f32" else 1e-12


def inv_frequencies(config: AttnConfig) -> np.ndarray:
    """Angular frequency of each interleaved pair, in float64."""
    i = np.arange(config.d_head // 2, dtype=np.float64)
    return config.rope_base ** (-2.0 * i / config.d_head)


def _check_dim(x: np.ndarray, config: AttnConfig, what: str) -> None:
    if x.shape[-1] != config.d_head:
        raise DimensionMismatch(f"{what} has dimension {x.shape[-1]}, expected {config.d_head}")


def rope_rotate(v: np.ndarray, position, config: AttnConfig) -> np.ndarray:
    """Rotate pair ``(2i, 2i+1)`` of ``v`` by ``position * base**(-2i/d)``.

    ``v`` may be a single vector with a scalar position or an ``(n, d)``
    array with ``n`` positions. Angles are formed in float64 and the result
    is cast to the config dtype.
    """
    x = np.asarray(v)
    _check_dim(x, config, "vector")
    pos = np.asarray(position, dtype=np.float64)
    if np.any(pos < 0):
        raise ValueError("positions must be non-negative")
    theta = pos[..., None] * inv_frequencies(config)
    dt = config.np_dtype
    cos, sin = np.cos(theta).astype(dt), np.sin(theta).astype(dt)
    x = x.astype(dt, copy=False)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, theta.shape[:-1] + (config.d_head,)), dtype=dt)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _valid_mask(mask, n: int) -> np.ndarray:
    if mask is None:
        valid = np.ones(n, dtype=bool)
    else:
        valid = np.asarray(mask, dtype=bool)
        if valid.shape != (n,):
            raise DimensionMismatch(f"mask has shape {valid.shape}, expected ({n},)")
    if not valid.any():
        raise EmptyValidSet("no valid key slots to attend to")
    return valid


def attention_pre_applied(
    q: np.ndarray,
    pos_q: int,
    keys_with_rope: np.ndarray,
    values: np.ndarray,
    mask=None,
    config: AttnConfig | None = None,
) -> np.ndarray:
    """``softmax(R(q)·Kᵀ/√d)·V`` over valid slots, keys already rotated."""
    config = config or AttnConfig(d_head=np.shape(q)[-1])
    keys = np.asarray(keys_with_rope, dtype=config.np_dtype)
    vals = np.asarray(values, dtype=config.np_dtype)
    _check_dim(keys, config, "keys")
    _check_dim(vals, config, "values")
    if keys.shape[0] != vals.shape[0]:
        raise DimensionMismatch(f"{keys.shape[0]} keys but {vals.shape[0]} values")
    valid = _valid_mask(mask, keys.shape[0])
    qr = rope_rotate(q, pos_q, config)
    scores = keys[valid] @ qr / np.sqrt(config.d_head).astype(config.np_dtype)
    w = np.exp(scores - scores.max())
    return (w / w.sum()) @ vals[valid]


def attention_fused(
    q: np.ndarray,
    pos_q: int,
    nope_keys: np.ndarray,
    key_positions: Sequence[int],
    values: np.ndarray,
    mask=None,
    config: AttnConfig | None = None,
    tile: int = 16,
) -> np.ndarray:
    """Attention over NoPE keys, rotating each key tile on the fly.

    Tiles are folded in with a running max and normalizer, the way a
    paged kernel walks one KV page at a time.
    """
    config = config or AttnConfig(d_head=np.shape(q)[-1])
    dt = config.np_dtype
    keys = np.asarray(nope_keys, dtype=dt)
    vals = np.asarray(values, dtype=dt)
    pos = np.asarray(key_positions)
    _check_dim(keys, config, "keys")
    _check_dim(vals, config, "values")
    if not keys.shape[0] == vals.shape[0] == pos.shape[0]:
        raise DimensionMismatch("keys, values, and key_positions differ in length")
    valid = _valid_mask(mask, keys.shape[0])
    qr = rope_rotate(q, pos_q, config)
    scale = dt.type(1.0 / np.sqrt(config.d_head))
    run_max = -np.inf
    norm = dt.type(0.0)
    acc = np.zeros(config.d_head, dtype=dt)
    for start in range(0, keys.shape[0], tile):
        sl = slice(start, start + tile)
        m = valid[sl]
        if not m.any():
            continue
        kr = rope_rotate(keys[sl][m], pos[sl][m], config)
        s = (kr @ qr) * scale
        new_max = max(run_max, s.max())
        correction = dt.type(np.exp(run_max - new_max)) if np.isfinite(run_max) else dt.type(0.0)
        w = np.exp(s - new_max)
        norm = norm * correction + w.sum()
        acc = acc * correction + w @ vals[sl][m]
        run_max = new_max
    return acc / norm


def attention_over_pages(
    q: np.ndarray,
    pos_q: int,
    pages: Sequence[KvPage],
    page_positions: Sequence[Sequence[int]],
    config: AttnConfig,
) -> np.ndarray:
    """Fused attention walking a request's page table, one page per tile."""
    if len(pages) != len(page_positions):
        raise DimensionMismatch(f"{len(pages)} pages but {len(page_positions)} position rows")
    keys = np.concatenate([p.keys for p in pages])
    vals = np.concatenate([p.values for p in pages])
    valid = np.concatenate([p.valid for p in pages])
    pos = np.concatenate([np.asarray(r) for r in page_positions])
    return attention_fused(q, pos_q, keys, pos, vals, valid, config, tile=pages[0].block_size)


def attention_scores(
    q: np.ndarray, pos_q: int, nope_keys: np.ndarray, key_positions: Sequence[int], config: AttnConfig
) -> np.ndarray:
    """Raw scaled dot products between the rotated query and rotated keys."""
    qr = rope_rotate(q, pos_q, config)
    kr = rope_rotate(nope_keys, np.asarray(key_positions), config)
    return kr @ qr / np.sqrt(config.d_head).astype(config.np_dtype)
