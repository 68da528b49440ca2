"""
Compressed sparse row encodings of a weight matrix, with exact bit accounting.

Absolute indices
    The matrix is cut into blocks (64x64 by default). Each block is a plain CSR
    triple (values, column indices, row extents): 2n + r + 1 numbers for n
    nonzeros in r rows. Column indices take ceil(log2(block cols)) bits, row
    extents ceil(log2(n + 1)) bits.

Relative indices
    Nonzeros are scanned row-major over the whole matrix and each one stores
    the distance to the previous one (the first from position -1) as gap - 1
    in b bits, so gaps 1..2^b are representable. A longer gap is split by
    dummy zero entries every 2^b positions. 2n numbers, no row extents.
"""

import math
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
from scipy.sparse import csr_matrix

Scheme = Literal["csr_absolute", "csr_relative"]

DEFAULT_BLOCK: Tuple[int, int] = (64, 64)
MAX_INDEX_BITS = 32


def bits_for(count: int) -> int:
    """Bits needed to address ``count`` distinct values (0 for a single value)."""
    return math.ceil(math.log2(count)) if count > 1 else 0


@dataclass(frozen=True)
class CsrBlock:
    row0: int
    col0: int
    shape: Tuple[int, int]
    values: np.ndarray
    indices: np.ndarray
    extents: np.ndarray

    @property
    def nonzeros(self) -> int:
        return int(self.values.size)

    @property
    def stored_numbers(self) -> int:
        return 2 * self.nonzeros + self.shape[0] + 1

    @property
    def index_bits(self) -> int:
        return max(1, bits_for(self.shape[1]))

    @property
    def extent_bits(self) -> int:
        return bits_for(self.nonzeros + 1)


@dataclass(frozen=True)
class SparseEncoding:
    scheme: Scheme
    shape: Tuple[int, int]
    values: np.ndarray
    indices: np.ndarray
    index_bits: int
    dummy_zero_count: int = 0
    block_shape: Optional[Tuple[int, int]] = None
    blocks: List[CsrBlock] = field(default_factory=list)

    @property
    def nonzeros(self) -> int:
        """Real (non-dummy) stored weights."""
        return int(self.values.size) - self.dummy_zero_count

    @property
    def stored_numbers(self) -> int:
        if self.scheme == "csr_absolute":
            return sum(block.stored_numbers for block in self.blocks)
        return 2 * int(self.values.size)

    def storage_bits(self, weight_bits: int) -> int:
        """Total bits for ``weight_bits``-bit values plus all index data."""
        if self.scheme == "csr_absolute":
            return sum(
                block.nonzeros * (weight_bits + block.index_bits)
                + (block.shape[0] + 1) * block.extent_bits
                for block in self.blocks
            )
        return int(self.values.size) * (weight_bits + self.index_bits)


def _as_matrix(m) -> np.ndarray:
    values = getattr(m, "values", m)
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim != 2:
        matrix = matrix.reshape(matrix.shape[0], -1)
    return matrix


def encode_csr_absolute(m, block: Tuple[int, int] = DEFAULT_BLOCK) -> SparseEncoding:
    matrix = _as_matrix(m)
    block_rows, block_cols = block
    if block_rows < 1 or block_cols < 1:
        raise ValueError(f"block dims must be >= 1, got {block}")
    blocks = []
    for row0 in range(0, max(matrix.shape[0], 1), block_rows):
        for col0 in range(0, max(matrix.shape[1], 1), block_cols):
            tile = matrix[row0:row0 + block_rows, col0:col0 + block_cols]
            sparse = csr_matrix(tile)
            sparse.eliminate_zeros()
            blocks.append(CsrBlock(row0, col0, tile.shape, sparse.data.copy(),
                                   sparse.indices.astype(np.int64), sparse.indptr.astype(np.int64)))
    values = np.concatenate([b.values for b in blocks]) if blocks else np.zeros(0)
    indices = np.concatenate([b.indices for b in blocks]) if blocks else np.zeros(0, np.int64)
    return SparseEncoding("csr_absolute", matrix.shape, values, indices,
                          max(1, bits_for(min(block_cols, max(matrix.shape[1], 1)))),
                          block_shape=(block_rows, block_cols), blocks=blocks)


def nonzero_gaps(m) -> np.ndarray:
    """Row-major distances between consecutive nonzeros, the first one from position -1."""
    flat = _as_matrix(m).ravel()
    positions = np.flatnonzero(flat)
    return np.diff(positions, prepend=-1).astype(np.int64)


def dummy_zeros(gaps: np.ndarray, bits: int) -> int:
    """sum(ceil(gap / 2^bits) - 1) over all gaps."""
    return int(np.sum((np.asarray(gaps, dtype=np.int64) - 1) >> bits))


def encode_csr_relative(m, bits: int) -> SparseEncoding:
    if not 1 <= bits <= MAX_INDEX_BITS:
        raise ValueError(f"index bits must be in [1, {MAX_INDEX_BITS}], got {bits}")
    matrix = _as_matrix(m)
    flat = matrix.ravel()
    positions = np.flatnonzero(flat)
    gaps = np.diff(positions, prepend=-1).astype(np.int64)
    span = np.int64(1) << bits
    counts = (gaps - 1) // span + 1
    total = int(counts.sum())
    indices = np.full(total, span - 1, dtype=np.int64)
    values = np.zeros(total, dtype=np.float64)
    if total:
        ends = np.cumsum(counts) - 1
        indices[ends] = gaps - (counts - 1) * span - 1
        values[ends] = flat[positions]
    return SparseEncoding("csr_relative", matrix.shape, values, indices, bits,
                          dummy_zero_count=total - positions.size)


def decode(encoding: SparseEncoding) -> np.ndarray:
    rows, cols = encoding.shape
    if encoding.scheme == "csr_absolute":
        out = np.zeros((rows, cols), dtype=np.float64)
        for block in encoding.blocks:
            tile = csr_matrix((block.values, block.indices, block.extents), shape=block.shape).toarray()
            out[block.row0:block.row0 + block.shape[0], block.col0:block.col0 + block.shape[1]] = tile
        return out
    flat = np.zeros(rows * cols, dtype=np.float64)
    positions = np.cumsum(encoding.indices + 1) - 1
    flat[positions] = encoding.values
    return flat.reshape(rows, cols)
