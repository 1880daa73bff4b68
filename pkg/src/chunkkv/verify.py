"""Randomized numeric checks for rotary attention over NoPE keys."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from chunkkv.rope import AttnConfig, attention_fused, attention_pre_applied, attention_scores, rope_rotate

D_HEADS = (8, 32, 64)
MAX_KEYS = 512
MAX_POSITION = 8192


@dataclass(frozen=True)
class SuiteResult:
    name: str
    instances: int
    max_deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_deviation < self.tolerance


def random_instance(rng: np.random.Generator, dtype: str):
    d = int(rng.choice(D_HEADS))
    n = int(rng.integers(1, MAX_KEYS + 1))
    cfg = AttnConfig(d_head=d, dtype=dtype)
    dt = cfg.np_dtype
    q = rng.standard_normal(d).astype(dt)
    keys = rng.standard_normal((n, d)).astype(dt)
    vals = rng.standard_normal((n, d)).astype(dt)
    pos = rng.integers(0, MAX_POSITION + 1, size=n)
    pos_q = int(rng.integers(0, MAX_POSITION + 1))
    mask = rng.random(n) < 0.9
    mask[rng.integers(n)] = True
    return cfg, q, pos_q, keys, pos, vals, mask


def fused_equivalence(instances: int, dtype: str = "f32", seed: int = 0, inject_error: float = 0.0) -> SuiteResult:
    """Max |fused - pre-applied| over random instances."""
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    for _ in range(instances):
        cfg, q, pos_q, keys, pos, vals, mask = random_instance(rng, dtype)
        pre = attention_pre_applied(q, pos_q, rope_rotate(keys, pos, cfg), vals, mask, cfg)
        fused = attention_fused(q, pos_q, keys, pos, vals, mask, cfg) + inject_error
        worst = max(worst, float(np.max(np.abs(fused.astype(np.float64) - pre))))
    return SuiteResult("fused_equivalence", instances, worst, AttnConfig(dtype=dtype).atol)


def shift_invariance(instances: int, dtype: str = "f32", seed: int = 0, inject_error: float = 0.0) -> SuiteResult:
    """Max score change when the query and all keys move by the same offset."""
    rng = np.random.default_rng([seed, 2])
    worst = 0.0
    for _ in range(instances):
        cfg, q, pos_q, keys, pos, _, _ = random_instance(rng, dtype)
        delta = int(rng.integers(0, MAX_POSITION + 1))
        base = attention_scores(q, pos_q, keys, pos, cfg)
        shifted = attention_scores(q, pos_q + delta, keys, pos + delta, cfg) + inject_error
        # Scores grow with sqrt(d); compare relative to their scale.
        scale = max(1.0, float(np.max(np.abs(base))))
        worst = max(worst, float(np.max(np.abs(shifted.astype(np.float64) - base))) / scale)
    return SuiteResult("shift_invariance", instances, worst, AttnConfig(dtype=dtype).atol)
