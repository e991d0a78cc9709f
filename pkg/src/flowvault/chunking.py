"""Content-defined, fixed-size and whole-stream chunking.

CDC uses a Rabin fingerprint (polynomial remainder over GF(2)) of a
sliding window. Because the fingerprint is linear in the window bytes,
the fingerprint of every window position is the XOR of one table lookup
per window offset, which numpy evaluates for the whole stream at once.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# x^63 + ... : the irreducible degree-63 polynomial used by LBFS.
RABIN_POLY = 0xBFE6B8A5BF378D83
DEFAULT_WINDOW = 48


class ChunkMode(enum.Enum):
    CDC = "cdc"
    FIXED = "fixed"
    NONE = "none"


@dataclass(frozen=True)
class ChunkingConfig:
    mode: ChunkMode = ChunkMode.CDC
    target_size: int = 4096
    min_size: int = 1024
    max_size: int = 16384
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if not 0 < self.min_size <= self.target_size <= self.max_size:
            raise ValueError(f"need 0 < min_size <= target_size <= max_size: {self}")
        if self.mode is ChunkMode.CDC:
            if self.target_size & (self.target_size - 1):
                raise ValueError(f"CDC target_size must be a power of two, got {self.target_size}")
            if self.window < 1:
                raise ValueError("CDC window must be at least one byte")

    @classmethod
    def cdc(cls, target: int = 4096, window: int = DEFAULT_WINDOW) -> "ChunkingConfig":
        return cls(ChunkMode.CDC, target, max(1, target // 4), target * 4, window)

    @classmethod
    def fixed(cls, size: int) -> "ChunkingConfig":
        return cls(ChunkMode.FIXED, size, size, size)

    @classmethod
    def none(cls) -> "ChunkingConfig":
        return cls(ChunkMode.NONE, 1, 1, 1)

    @classmethod
    def parse(cls, text: str) -> "ChunkingConfig":
        """Parse ``cdc:<target>``, ``fixed:<size>`` or ``none``."""
        mode, _, size = text.strip().lower().partition(":")
        if mode == "none":
            return cls.none()
        if mode not in ("cdc", "fixed") or not size.isdigit():
            raise ValueError(f"bad chunking spec {text!r}; expected cdc:<n>, fixed:<n> or none")
        return cls.cdc(int(size)) if mode == "cdc" else cls.fixed(int(size))

    def __str__(self):
        return "none" if self.mode is ChunkMode.NONE else f"{self.mode.value}:{self.target_size}"

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "target_size": self.target_size, "min_size": self.min_size,
                "max_size": self.max_size, "window": self.window}

    @classmethod
    def from_dict(cls, d: dict) -> "ChunkingConfig":
        return cls(ChunkMode(d["mode"]), d["target_size"], d["min_size"], d["max_size"], d["window"])


def gf2_mulmod(a: int, b: int, poly: int = RABIN_POLY) -> int:
    """Product of two GF(2) polynomials reduced modulo ``poly``."""
    deg = poly.bit_length() - 1
    top = 1 << deg
    result = 0
    while b:
        if b & 1:
            result ^= a
        b >>= 1
        a <<= 1
        if a & top:
            a ^= poly
    return result


@lru_cache(maxsize=8)
def rabin_tables(window: int, poly: int = RABIN_POLY) -> np.ndarray:
    """``T[j][b]`` = fingerprint contribution of byte ``b`` at window offset ``j``."""
    deg = poly.bit_length() - 1
    x8 = gf2_mulmod(1 << 4, 1 << 4, poly) if deg > 8 else None  # x^8 mod poly
    tables = np.zeros((window, 256), dtype=np.uint64)
    power = 1  # x^(8k) for the byte k places from the window end
    for j in range(window - 1, -1, -1):
        basis = [gf2_mulmod(1 << t, power, poly) for t in range(8)]
        row = [0] * 256
        for b in range(1, 256):
            low = b & -b
            row[b] = row[b ^ low] ^ basis[low.bit_length() - 1]
        tables[j] = row
        power = gf2_mulmod(power, x8, poly)
    return tables


def window_fingerprints(data: bytes, window: int = DEFAULT_WINDOW, poly: int = RABIN_POLY) -> np.ndarray:
    """Fingerprint of ``data[k:k+window]`` for every ``k``."""
    n = len(data) - window + 1
    if n <= 0:
        return np.zeros(0, dtype=np.uint64)
    arr = np.frombuffer(data, dtype=np.uint8)
    tables = rabin_tables(window, poly)
    fp = tables[0][arr[0:n]]
    for j in range(1, window):
        fp ^= tables[j][arr[j:j + n]]
    return fp


@lru_cache(maxsize=8)
def _pair_tables(window: int, bits: int, poly: int = RABIN_POLY) -> np.ndarray:
    """Low ``bits`` of the contribution of each byte pair at even window offsets."""
    dtype = np.uint16 if bits <= 16 else np.uint32 if bits <= 32 else np.uint64
    low = rabin_tables(window, poly) & np.uint64((1 << bits) - 1)
    out = np.empty(((window + 1) // 2, 65536), dtype=dtype)
    for j in range(0, window, 2):
        hi = low[j].astype(dtype)
        lo = low[j + 1].astype(dtype) if j + 1 < window else np.zeros(256, dtype=dtype)
        # the pair value is data[k+j] << 8 | data[k+j+1]
        out[j // 2] = (hi[:, None] ^ lo[None, :]).reshape(-1)
    return out


def cdc_candidates(data: bytes, config: ChunkingConfig) -> np.ndarray:
    """Exclusive end offsets where the boundary predicate fires.

    The predicate only looks at the low ``log2(target)`` fingerprint bits,
    and each bit is a linear function of the window, so only those bits
    are evaluated, two window bytes per table lookup.
    """
    w = config.window
    n = len(data) - w + 1
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    bits = max(1, (config.target_size - 1).bit_length())
    tables = _pair_tables(w, bits)
    arr = np.frombuffer(data, dtype=np.uint8)
    padded = np.concatenate((arr, np.zeros(1, dtype=np.uint8)))
    pair = (padded[:-1].astype(np.uint16) << 8) | padded[1:]
    fp = tables[0][pair[0:n]]
    for j in range(1, tables.shape[0]):
        fp ^= tables[j][pair[2 * j:2 * j + n]]
    mask = tables.dtype.type(config.target_size - 1)
    return np.flatnonzero((fp & mask) == mask) + w


def chunk_stream(data: bytes, config: ChunkingConfig) -> list:
    """Split ``data`` into ``(offset, length)`` pieces that tile it exactly."""
    n = len(data)
    if n == 0:
        return []
    if config.mode is ChunkMode.NONE:
        return [(0, n)]
    if config.mode is ChunkMode.FIXED:
        size = config.target_size
        return [(off, min(size, n - off)) for off in range(0, n, size)]

    cands = cdc_candidates(data, config)
    chunks = []
    start = 0
    lo_size, hi_size = config.min_size, config.max_size
    while start < n:
        i = int(np.searchsorted(cands, start + lo_size))
        hi = start + hi_size
        if i < cands.size and cands[i] <= hi:
            end = int(cands[i])
        elif hi < n:
            end = hi
        else:
            end = n
        chunks.append((start, end - start))
        start = end
    return chunks
