"""Bit-packed binary matrix products (XNOR/AND + popcount) for inference.

Operands are packed row-wise into little-endian 64-bit words; bit ``j`` of
word ``w`` holds column ``64*w + j``.  The right-hand operand of a product
``A[m x k] @ B[k x n]`` is stored pre-transposed, i.e. as the packed rows of
``B.T`` (``n`` rows of ``k`` bits), so both operands are scanned along rows.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EncodingError, ParameterError

WORD_BITS = 64
SIGN = "sign"   # bit 1 -> +1, bit 0 -> -1
MASK = "mask"   # bit 1 -> 1,  bit 0 -> 0

_ROW_CHUNK_ELEMS = 1 << 22


@dataclass
class PackedBits:
    rows: int
    cols: int
    words: np.ndarray   # uint64 [rows, n_words]
    semantics: str

    @property
    def n_words(self) -> int:
        return self.words.shape[1]

    def __eq__(self, other):
        return (isinstance(other, PackedBits) and self.rows == other.rows
                and self.cols == other.cols and self.semantics == other.semantics
                and np.array_equal(self.words, other.words))

    def bitstring(self, row: int = 0) -> str:
        """Bits of one row in column order, e.g. ``'101'``."""
        bits = np.unpackbits(self.words[row].view(np.uint8), bitorder="little")[: self.cols]
        return "".join(str(int(b)) for b in bits)


def n_words_for(cols: int) -> int:
    return max(1, -(-cols // WORD_BITS))


def pack(x, semantics: str = SIGN) -> PackedBits:
    """Losslessly encode a 1-d or 2-d array from the codomain of ``semantics``."""
    x = np.asarray(getattr(x, "data", x))
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionError(f"pack expects a 1-d or 2-d array, got shape {x.shape}")
    if semantics == SIGN:
        bad = (x != 1) & (x != -1)
        bits = x > 0
    elif semantics == MASK:
        bad = (x != 1) & (x != 0)
        bits = x == 1
    else:
        raise EncodingError(f"unknown semantics {semantics!r}")
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise EncodingError(f"element {idx} = {x[idx]!r} is outside the {semantics} codomain")
    rows, cols = x.shape
    nw = n_words_for(cols)
    padded = np.zeros((rows, nw * WORD_BITS), dtype=bool)
    padded[:, :cols] = bits
    raw = np.packbits(padded, axis=1, bitorder="little")
    words = np.ascontiguousarray(raw).view("<u8").reshape(rows, nw)
    return PackedBits(rows, cols, words.astype(np.uint64, copy=False), semantics)


def pack_columns(b, semantics: str = SIGN) -> PackedBits:
    """Pack the right-hand operand ``b[k x n]`` in its pre-transposed layout."""
    b = np.asarray(getattr(b, "data", b))
    return pack(b.T, semantics)


def unpack(p: PackedBits) -> np.ndarray:
    bits = np.unpackbits(p.words.view(np.uint8).reshape(p.rows, -1), axis=1,
                         bitorder="little")[:, : p.cols]
    if p.semantics == SIGN:
        return np.where(bits == 1, np.float32(1), np.float32(-1))
    return bits.astype(np.float32)


def _check_pair(a: PackedBits, b: PackedBits, sem_a: str, sem_b: str):
    if a.semantics != sem_a or b.semantics != sem_b:
        raise EncodingError(f"expected ({sem_a}, {sem_b}) operands, got ({a.semantics}, {b.semantics})")
    if a.cols != b.cols:
        raise DimensionError(f"inner extents differ: {a.cols} vs {b.cols}")


def _popcount_rows(a_words, b_words, op):
    """popcount(op(a_i, b_j)) summed over words, for all row pairs (int64 [m, n])."""
    m, nw = a_words.shape
    n = b_words.shape[0]
    out = np.empty((m, n), dtype=np.int64)
    step = max(1, _ROW_CHUNK_ELEMS // max(1, n * nw))
    for i in range(0, m, step):
        blk = op(a_words[i:i + step, None, :], b_words[None, :, :])
        out[i:i + step] = np.bitwise_count(blk).sum(axis=2, dtype=np.int64)
    return out


def xnor_counts(a: PackedBits, b: PackedBits) -> np.ndarray:
    """Integer dot products of ±1 rows: k - 2 * popcount(a XOR b)."""
    _check_pair(a, b, SIGN, SIGN)
    return a.cols - 2 * _popcount_rows(a.words, b.words, np.bitwise_xor)


def mask_sign_counts(a: PackedBits, b: PackedBits) -> np.ndarray:
    """Integer dot products of {0,1} rows with ±1 rows: 2*popcount(a AND b) - popcount(a)."""
    _check_pair(a, b, MASK, SIGN)
    ones = np.bitwise_count(a.words).sum(axis=1, dtype=np.int64)
    return 2 * _popcount_rows(a.words, b.words, np.bitwise_and) - ones[:, None]


def _scaled(counts, scale_a, scale_b):
    return counts.astype(np.float32) * (np.float32(scale_a) * np.float32(scale_b))


def xnor_matmul(a: PackedBits, b: PackedBits, scale_a=1.0, scale_b=1.0) -> np.ndarray:
    """scale_a * scale_b * (A @ B) for ±1 operands; ``b`` holds the rows of B.T."""
    return _scaled(xnor_counts(a, b), scale_a, scale_b)


def mask_sign_matmul(a: PackedBits, b: PackedBits, scale_a=1.0, scale_b=1.0) -> np.ndarray:
    """scale_a * scale_b * (A @ B) for {0,1} ``a`` and ±1 ``b`` (rows of B.T)."""
    return _scaled(mask_sign_counts(a, b), scale_a, scale_b)


@dataclass
class BenchReport:
    m: int
    k: int
    n: int
    reps: int
    packed_mean: float
    packed_std: float
    float_mean: float
    float_std: float
    packed_checksum: float
    float_checksum: float

    @property
    def words(self) -> int:
        return self.m * self.n * n_words_for(self.k)

    @property
    def packed_words_per_sec(self) -> float:
        return self.words / self.packed_mean if self.packed_mean > 0 else float("inf")

    @property
    def float_words_per_sec(self) -> float:
        return self.words / self.float_mean if self.float_mean > 0 else float("inf")

    @property
    def checksums_match(self) -> bool:
        return self.packed_checksum == self.float_checksum

    def table(self) -> str:
        lines = [
            f"shape      m={self.m} k={self.k} n={self.n} reps={self.reps}",
            f"{'path':<8}{'mean_s':>12}{'std_s':>12}{'words/s':>14}{'checksum':>16}",
            f"{'packed':<8}{self.packed_mean:>12.6f}{self.packed_std:>12.6f}"
            f"{self.packed_words_per_sec:>14.4g}{self.packed_checksum:>16.1f}",
            f"{'float':<8}{self.float_mean:>12.6f}{self.float_std:>12.6f}"
            f"{self.float_words_per_sec:>14.4g}{self.float_checksum:>16.1f}",
            f"checksums match: {self.checksums_match}",
        ]
        return "\n".join(lines)


def bench(m: int, k: int, n: int, reps: int = 5, seed: int = 0) -> BenchReport:
    """Time xnor_matmul on pre-packed operands against a float32 matmul of the same ±1 data."""
    if reps < 1:
        raise ParameterError("reps must be >= 1")
    if min(m, k, n) < 1:
        raise ParameterError("extents must be >= 1")
    rng = np.random.default_rng(seed)
    a = np.where(rng.random((m, k)) < 0.5, np.float32(-1), np.float32(1))
    b = np.where(rng.random((k, n)) < 0.5, np.float32(-1), np.float32(1))
    pa, pb = pack(a), pack_columns(b)
    tp, tf = [], []
    out_p = out_f = None
    for _ in range(reps):
        t0 = time.perf_counter()
        out_p = xnor_matmul(pa, pb)
        tp.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        out_f = a @ b
        tf.append(time.perf_counter() - t0)
    return BenchReport(m, k, n, reps, float(np.mean(tp)), float(np.std(tp)),
                       float(np.mean(tf)), float(np.std(tf)),
                       float(out_p.sum(dtype=np.float64)), float(out_f.sum(dtype=np.float64)))
