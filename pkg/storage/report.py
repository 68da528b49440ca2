"""
Storage reports in the layout of the published comparison tables.

    weight store           n * w / 8 bytes (values only)
    weight + index (rel.)  (n + dummies) * (w + i) / 8 bytes
    weight + index (abs.)  64x64 block CSR estimate
    compress rate          dense 32-bit bytes / weight + index

Structured pruning leaves dense, smaller matrices, so its weight + index is
the weight store itself. A layer set with no pruned weight needs no index
either. KB and MB are decimal (10^3 / 10^6 bytes).
"""

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Literal, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from models.network import ConvNet, Scope
from storage.csr import MAX_INDEX_BITS, DEFAULT_BLOCK, dummy_zeros, encode_csr_absolute, nonzero_gaps

Regime = Literal["nonstructured", "structured"]
IndexScheme = Literal["relative", "absolute"]

DENSE_BITS = 32
KB = 10 ** 3
MB = 10 ** 6


@dataclass(frozen=True)
class StorageReport:
    weight_count: int
    dense_count: int
    quant_bits: int
    index_bits: int
    dummy_zeros: int
    indexed: bool
    weight_store_bytes: float
    relative_bytes: float
    absolute_bytes: float
    scheme: IndexScheme = "relative"

    @property
    def dense_bytes(self) -> float:
        return self.dense_count * DENSE_BITS / 8

    @property
    def weight_plus_index_bytes(self) -> float:
        if not self.indexed:
            return self.weight_store_bytes
        return self.relative_bytes if self.scheme == "relative" else self.absolute_bytes

    @property
    def relative_lower_bound_bytes(self) -> float:
        """Relative total without any dummy zero."""
        if not self.indexed:
            return self.weight_store_bytes
        return self.weight_count * (self.quant_bits + self.index_bits) / 8

    @property
    def pruning_rate(self) -> Union[Fraction, float]:
        return Fraction(self.dense_count, self.weight_count) if self.weight_count else math.inf

    @property
    def compression_rate(self) -> float:
        total = self.weight_plus_index_bytes
        return self.dense_bytes / total if total else math.inf

    def to_row(self) -> Dict[str, object]:
        row = asdict(self)
        row.update(
            pruning_rate=float(self.pruning_rate),
            weight_store=format_bytes(self.weight_store_bytes),
            weight_plus_index=format_bytes(self.weight_plus_index_bytes),
            compression_rate=round(self.compression_rate, 2),
        )
        return row


def format_bytes(value: float, digits: int = 2) -> str:
    if value >= MB:
        return f"{value / MB:.{digits}f}MB"
    return f"{value / KB:.{digits}f}KB"


def parse_amount(text: str) -> float:
    """'2.2M' -> 2.2e6, '25.5K' -> 25500, '0.26MB' -> 260000 (bytes), '11.2×' -> 11.2."""
    value = text.strip().upper().replace("×", "").rstrip("X")
    if value.endswith("B"):
        value = value[:-1]
    scale = 1.0
    if value.endswith("M"):
        scale, value = MB, value[:-1]
    elif value.endswith("K"):
        scale, value = KB, value[:-1]
    return float(value) * scale


def relative_bytes(gap_sets: Sequence[np.ndarray], quant_bits: int, index_bits: int) -> Tuple[float, int]:
    """Relative-index total for several matrices sharing one index width; also returns the dummy count."""
    stored = sum(int(g.size) for g in gap_sets)
    dummies = sum(dummy_zeros(g, index_bits) for g in gap_sets)
    return (stored + dummies) * (quant_bits + index_bits) / 8, dummies


def _matrix_list(matrices) -> List[np.ndarray]:
    if isinstance(matrices, np.ndarray) or hasattr(matrices, "values"):
        matrices = [matrices]
    return [np.asarray(getattr(m, "values", m)) for m in matrices]


def optimize_index_bits(matrices, quant_bits: int = DENSE_BITS,
                        max_bits: int = MAX_INDEX_BITS) -> Tuple[int, StorageReport]:
    """
    Index width in [1, max_bits] minimizing the relative-index total, dummy zeros
    included. Ties go to fewer bits. Accepts one matrix or a list sharing the width.
    """
    matrices = _matrix_list(matrices)
    gap_sets = [nonzero_gaps(m) for m in matrices]
    n = sum(int(g.size) for g in gap_sets)
    dense = sum(int(m.size) for m in matrices)
    best_bits, best_bytes, best_dummies = 1, math.inf, 0
    for bits in range(1, max_bits + 1):
        total, dummies = relative_bytes(gap_sets, quant_bits, bits)
        if total < best_bytes:
            best_bits, best_bytes, best_dummies = bits, total, dummies
    if n == 0:
        best_bytes = 0.0
    report = StorageReport(
        weight_count=n, dense_count=dense, quant_bits=quant_bits, index_bits=best_bits,
        dummy_zeros=best_dummies, indexed=True, weight_store_bytes=n * quant_bits / 8,
        relative_bytes=best_bytes, absolute_bytes=math.nan,
    )
    return best_bits, report


def report_from_counts(weight_count: float, dense_count: float, quant_bits: int,
                       regime: Regime = "nonstructured", index_bits: int = 0,
                       dummy_count: int = 0) -> StorageReport:
    """Report from published counts alone (no sparsity pattern, so no dummies unless given)."""
    indexed = regime == "nonstructured"
    store = weight_count * quant_bits / 8
    rel = (weight_count + dummy_count) * (quant_bits + index_bits) / 8 if indexed else store
    return StorageReport(
        weight_count=int(round(weight_count)), dense_count=int(round(dense_count)),
        quant_bits=quant_bits, index_bits=index_bits if indexed else 0, dummy_zeros=dummy_count,
        indexed=indexed, weight_store_bytes=store, relative_bytes=rel, absolute_bytes=math.nan,
    )


def layer_matrices(model: ConvNet, scope: Scope = "conv") -> Dict[str, np.ndarray]:
    """GEMM-form weight matrices of the layers in ``scope``."""
    weights = model.weight_arrays()
    return {
        spec.name: weights[spec.name].reshape(weights[spec.name].shape[0], -1)
        for spec in model.specs
        if scope == "all" or spec.kind == "conv"
    }


def storage_report(model: ConvNet, quant_bits: int = DENSE_BITS, scheme: IndexScheme = "relative",
                   scope: Scope = "conv", regime: Regime = "nonstructured",
                   block: Tuple[int, int] = DEFAULT_BLOCK) -> StorageReport:
    matrices = list(layer_matrices(model, scope).values())
    n = sum(int(np.count_nonzero(m)) for m in matrices)
    dense = model.dense_weight_count(scope)
    store = n * quant_bits / 8
    indexed = regime == "nonstructured" and n < dense
    if not indexed:
        report = StorageReport(n, dense, quant_bits, 0, 0, False, store, store, store, scheme)
    else:
        bits, rel = optimize_index_bits(matrices, quant_bits)
        absolute_bits = sum(encode_csr_absolute(m, block).storage_bits(quant_bits) for m in matrices)
        report = StorageReport(n, dense, quant_bits, bits, rel.dummy_zeros, True, store,
                               rel.relative_bytes, absolute_bits / 8, scheme)
    logger.debug(
        f"storage ({scope}, {regime}): n={n} of {dense}, w={quant_bits}, i={report.index_bits}, "
        f"total={format_bytes(report.weight_plus_index_bytes)}"
    )
    return report


def reports_frame(reports: Iterable[Tuple[str, StorageReport]]) -> pd.DataFrame:
    """Table-ordered pandas frame of named reports."""
    rows = []
    for label, report in reports:
        row = report.to_row()
        rows.append({
            "label": label,
            "weights": row["weight_count"],
            "prune_rate": round(row["pruning_rate"], 1),
            "quant_bits": report.quant_bits,
            "weight_store": row["weight_store"],
            "weight_plus_index": row["weight_plus_index"],
            "index_bits": report.index_bits,
            "compress_rate": row["compression_rate"],
            "dummy_zeros": report.dummy_zeros,
            "absolute_total": format_bytes(report.absolute_bytes) if report.indexed else row["weight_store"],
        })
    return pd.DataFrame(rows)
