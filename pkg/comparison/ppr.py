"""
Pruning-to-performance ratio (PPR) rules.

PPR = weight-reduction factor / speedup factor. Structured pruning runs on
ordinary dense kernels (PPR ~ 1); non-structured pruning needs sparse
kernels or accelerators whose measured PPR is 2.7 at best. So non-structured
pruning wins on computation only when its rate beats the structured rate by
more than that factor.

Rates arrive as printed decimals; comparisons go through ``Fraction`` of
their decimal text so boundary cases (e.g. 2.7 vs 1.0 at PPR 2.7) are exact.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Literal, Union

from models.errors import AccuracyMismatchError
from storage.report import StorageReport

Winner = Literal["structured", "nonstructured", "tie"]

DEFAULT_NONSTRUCTURED_PPR = 2.7
DEFAULT_ACCURACY_BAND = 0.001

Number = Union[int, float, Fraction, str]


def exact(value: Number) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


@dataclass(frozen=True)
class PprModel:
    structured_ppr: float = 1.0
    nonstructured_ppr: float = DEFAULT_NONSTRUCTURED_PPR

    def __post_init__(self):
        if self.structured_ppr < 1 or self.nonstructured_ppr < 1:
            raise ValueError("PPR values must be >= 1")

    @property
    def threshold(self) -> Fraction:
        """Rate ratio non-structured / structured that non-structured must exceed."""
        return exact(self.nonstructured_ppr) / exact(self.structured_ppr)


def effective_speedup(prune_rate: Number, ppr: Number) -> float:
    """rate / ppr; below 1 means pruning does not pay off at all."""
    rate, ratio = exact(prune_rate), exact(ppr)
    if rate < 1 or ratio < 1:
        raise ValueError(f"rate and ppr must be >= 1, got {prune_rate}, {ppr}")
    return float(rate / ratio)


@dataclass(frozen=True)
class ComputeVerdict:
    winner: Winner
    rate_ratio: float
    threshold: float
    structured_speedup: float
    nonstructured_speedup: float

    @property
    def no_benefit(self) -> bool:
        return max(self.structured_speedup, self.nonstructured_speedup) <= 1.0


def decide_compute(ns_rate: Number, s_rate: Number, ppr: PprModel = PprModel()) -> ComputeVerdict:
    """Non-structured wins iff ns_rate / s_rate > PPR; otherwise structured."""
    ns, s = exact(ns_rate), exact(s_rate)
    if ns < 1 or s < 1:
        raise ValueError(f"pruning rates must be >= 1, got {ns_rate}, {s_rate}")
    winner: Winner = "nonstructured" if ns > ppr.threshold * s else "structured"
    return ComputeVerdict(
        winner=winner,
        rate_ratio=float(s / ns),
        threshold=float(1 / ppr.threshold),
        structured_speedup=effective_speedup(s, ppr.structured_ppr),
        nonstructured_speedup=effective_speedup(ns, ppr.nonstructured_ppr),
    )


@dataclass(frozen=True)
class StorageVerdict:
    winner: Winner
    nonstructured_bytes: float
    structured_bytes: float

    @property
    def margin(self) -> float:
        """Relative saving of the winner over the loser."""
        larger = max(self.nonstructured_bytes, self.structured_bytes)
        if larger == 0:
            return 0.0
        return abs(self.nonstructured_bytes - self.structured_bytes) / larger


def check_accuracy_band(ns_accuracy: float, s_accuracy: float, band: float = DEFAULT_ACCURACY_BAND) -> None:
    if math.isnan(ns_accuracy) or math.isnan(s_accuracy):
        return
    if abs(ns_accuracy - s_accuracy) > band + 1e-12:
        raise AccuracyMismatchError(
            f"accuracies {ns_accuracy:.4f} and {s_accuracy:.4f} differ by more than the {band:.4f} band"
        )


def decide_storage(ns_report: StorageReport, s_report: StorageReport,
                   ns_accuracy: float = math.nan, s_accuracy: float = math.nan,
                   band: float = DEFAULT_ACCURACY_BAND) -> StorageVerdict:
    """Smaller weight + index storage wins, once both sides sit in the same accuracy band."""
    check_accuracy_band(ns_accuracy, s_accuracy, band)
    ns_bytes = ns_report.weight_plus_index_bytes
    s_bytes = s_report.weight_plus_index_bytes
    if ns_bytes == s_bytes:
        winner: Winner = "tie"
    else:
        winner = "nonstructured" if ns_bytes < s_bytes else "structured"
    return StorageVerdict(winner, ns_bytes, s_bytes)
