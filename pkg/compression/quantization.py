"""
Equal-distance quantization level sets.

A level set is (M levels, spacing d), symmetric about 0:
    q_j = d * (j - (M - 1) / 2),   j = 0 .. M-1
Zero is a level iff M is odd. Binary = {-w, +w} (M=2, d=2w), ternary =
{-w, 0, +w} (M=3, d=w). A b-bit set has M = 2^b levels, or 2^b - 1 when
zero must be representable.

The spacing of each layer is chosen by a calibration sweep that minimizes the
Euclidean projection distance of that layer's weights.
"""

import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, Mapping, Optional

import numpy as np
from loguru import logger

from compression.admm import (
    AdmmState,
    IterationCallback,
    RhoSchedule,
    admm_regularize,
    masked_map_retrain_quant,
)
from compression.projections import ConstraintSpec, nearest_level
from models.network import ConvNet
from training.mnist_idx import Dataset
from training.trainer import TrainConfig

CALIBRATION_POINTS = 200


@dataclass(frozen=True)
class LevelSet:
    count: int
    spacing: float

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"a level set needs at least one level, got {self.count}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be > 0, got {self.spacing}")

    @classmethod
    def binary(cls, w: float) -> "LevelSet":
        return cls(2, 2.0 * w)

    @classmethod
    def ternary(cls, w: float) -> "LevelSet":
        return cls(3, w)

    @staticmethod
    def count_for_bits(bits: int, include_zero: bool = False) -> int:
        if bits < 1:
            raise ValueError(f"bits must be >= 1, got {bits}")
        count = 2 ** bits
        return count - 1 if include_zero and count > 2 else count

    @property
    def bits(self) -> int:
        """Storage bits per weight."""
        return max(1, math.ceil(math.log2(self.count)))

    @property
    def has_zero(self) -> bool:
        return self.count % 2 == 1

    def levels(self) -> np.ndarray:
        j = np.arange(self.count, dtype=np.float64)
        levels = self.spacing * (j - (self.count - 1) / 2.0)
        if self.has_zero:
            levels[self.count // 2] = 0.0
        return levels


def projection_distance(weights: np.ndarray, levels: np.ndarray) -> float:
    diff = weights - nearest_level(weights, levels)
    return float(np.sum(diff * diff))


def calibrate(weights: np.ndarray, count: int, where: Optional[np.ndarray] = None,
              points: int = CALIBRATION_POINTS) -> LevelSet:
    """
    Spacing for ``count`` levels that minimizes the projection distance of ``weights``.

    Only coordinates selected by ``where`` (e.g. unpruned weights) take part.
    """
    values = np.asarray(weights, dtype=np.float64)
    if where is not None:
        values = values[np.asarray(where, dtype=bool).reshape(values.shape)]
    values = values.ravel()
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    if peak == 0.0:
        return LevelSet(count, 1.0)
    half_span = max((count - 1) / 2.0, 0.5)
    best: Optional[LevelSet] = None
    best_distance = math.inf
    for outer in np.linspace(peak / points, peak, points):
        candidate = LevelSet(count, float(outer / half_span))
        distance = projection_distance(values, candidate.levels())
        if distance < best_distance:
            best, best_distance = candidate, distance
    logger.debug(f"calibrated {count} levels: spacing={best.spacing:.5g} distance={best_distance:.5g}")
    return best


def calibrate_model(model: ConvNet, bits: int, layers: Optional[Iterable[str]] = None,
                    include_zero: bool = False) -> Dict[str, np.ndarray]:
    """Per-layer calibrated levels for ``bits``-bit weights; pruned coordinates do not vote."""
    count = LevelSet.count_for_bits(bits, include_zero)
    weights = model.weight_arrays()
    out = {}
    for name in layers or model.layer_names:
        out[name] = calibrate(weights[name], count, where=model.mask_array(name)).levels()
    return out


def quantize_model(
    model: ConvNet,
    bits: int,
    dataset: Dataset,
    schedule: RhoSchedule,
    config: TrainConfig,
    admm_epochs: int,
    retrain_epochs: int,
    epsilon: float = 0.2,
    layers: Optional[Iterable[str]] = None,
    include_zero: bool = False,
    absorb_zeros: bool = False,
    baseline_accuracy: Optional[float] = None,
    levels: Optional[Mapping[str, np.ndarray]] = None,
    state: Optional[AdmmState] = None,
    on_iteration: Optional[IterationCallback] = None,
) -> ConvNet:
    """
    ADMM quantization of ``layers`` (all by default) followed by masked quantization mapping.

    A saved ``state`` resumes ADMM; its level sets replace calibration.
    """
    if state is not None:
        levels = {name: np.asarray(spec.levels) for name, spec in state.specs.items()}
    levels = dict(levels) if levels is not None else calibrate_model(model, bits, layers, include_zero)
    specs = {name: ConstraintSpec.quantization(lv) for name, lv in levels.items()}
    logger.info(f"quantizing {len(specs)} layers to {bits} bits")
    regularized, _ = admm_regularize(model, specs, dataset, schedule, replace(config, epochs=admm_epochs),
                                     state=state, on_iteration=on_iteration)
    return masked_map_retrain_quant(regularized, levels, epsilon, dataset, config, epochs=retrain_epochs,
                                    baseline_accuracy=baseline_accuracy, absorb_zeros=absorb_zeros)
