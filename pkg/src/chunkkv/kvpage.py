"""KV page payload: one block's worth of NoPE key/value vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def resolve_dtype(dtype: str | np.dtype) -> np.dtype:
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in DTYPES.values():
        raise ValueError(f"unsupported dtype {dtype!r}; use f32 or f64")
    return dt


@dataclass
class KvPage:
    """Keys and values for ``block_size`` slots; PAD slots are zero and invalid."""

    keys: np.ndarray
    values: np.ndarray
    valid: np.ndarray

    @classmethod
    def zeros(cls, block_size: int, d_head: int, dtype: str | np.dtype = "f32") -> KvPage:
        dt = resolve_dtype(dtype)
        return cls(
            keys=np.zeros((block_size, d_head), dtype=dt),
            values=np.zeros((block_size, d_head), dtype=dt),
            valid=np.zeros(block_size, dtype=bool),
        )

    @property
    def block_size(self) -> int:
        return self.keys.shape[0]

    @property
    def d_head(self) -> int:
        return self.keys.shape[1]

    def copy(self) -> KvPage:
        return KvPage(self.keys.copy(), self.values.copy(), self.valid.copy())

    def to_bytes(self) -> bytes:
        return self.keys.tobytes() + self.values.tobytes() + self.valid.tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KvPage):
            return NotImplemented
        return (
            self.keys.dtype == other.keys.dtype
            and self.keys.shape == other.keys.shape
            and self.to_bytes() == other.to_bytes()
        )
