"""
Euclidean projections onto the per-layer constraint sets (ADMM subproblem 2).

    nonstructured(alpha)  keep the alpha entries of largest magnitude
    filter(beta)          keep the beta filters  (X[a,:,:,:]) of largest squared norm
    channel(gamma)        keep the gamma channels (X[:,b,:,:]) of largest squared norm
    column(theta)         keep the theta column vectors (X[:,b,c,d]) of largest squared norm
    quantization(levels)  map every entry to its closest level

Ties keep the lower index (stable ordering); quantization ties go to the
smaller level. Budgets are counts, never ratios. 2-D fc weights are treated
as (rows, cols, 1, 1).

An optional boolean ``where`` restricts the projection to a sub-support:
pruning variants never revive coordinates outside it and quantization leaves
coordinates outside it untouched.
"""

from dataclasses import dataclass
from typing import Literal, NamedTuple, Optional, Tuple

import numpy as np

from models.errors import InfeasibleBudgetError
from models.weights import GroupAxis, from_group_matrix, group_count, group_matrix

Variant = Literal["nonstructured", "filter", "channel", "column", "quantization"]

PRUNING_VARIANTS: Tuple[Variant, ...] = ("nonstructured", "filter", "channel", "column")


def check_equal_distance(levels: np.ndarray, rtol: float = 1e-9) -> None:
    levels = np.asarray(levels, dtype=np.float64)
    if levels.size == 0:
        raise ValueError("quantization needs at least one level")
    gaps = np.diff(levels)
    if np.any(gaps <= 0):
        raise ValueError("quantization levels must be strictly increasing")
    if gaps.size and not np.allclose(gaps, gaps[0], rtol=rtol, atol=0.0):
        raise ValueError("quantization levels must be equally spaced")


@dataclass(frozen=True)
class ConstraintSpec:
    """Constraint set S_i of one layer: a pruning budget or a quantization level set."""

    variant: Variant
    budget: Optional[int] = None
    levels: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.variant == "quantization":
            if self.levels is None:
                raise ValueError("quantization spec needs levels")
            object.__setattr__(self, "levels", tuple(float(q) for q in self.levels))
            check_equal_distance(np.array(self.levels))
        elif self.variant in PRUNING_VARIANTS:
            if self.budget is None or int(self.budget) < 0:
                raise InfeasibleBudgetError(f"{self.variant} budget must be >= 0, got {self.budget}")
            object.__setattr__(self, "budget", int(self.budget))
        else:
            raise ValueError(f"unknown constraint variant {self.variant!r}")

    @classmethod
    def nonstructured(cls, alpha: int) -> "ConstraintSpec":
        return cls("nonstructured", budget=alpha)

    @classmethod
    def filter(cls, beta: int) -> "ConstraintSpec":
        return cls("filter", budget=beta)

    @classmethod
    def channel(cls, gamma: int) -> "ConstraintSpec":
        return cls("channel", budget=gamma)

    @classmethod
    def column(cls, theta: int) -> "ConstraintSpec":
        return cls("column", budget=theta)

    @classmethod
    def quantization(cls, levels) -> "ConstraintSpec":
        return cls("quantization", levels=tuple(np.asarray(levels, dtype=np.float64).tolist()))

    @property
    def is_pruning(self) -> bool:
        return self.variant in PRUNING_VARIANTS

    @property
    def group_axis(self) -> Optional[GroupAxis]:
        return self.variant if self.variant in ("filter", "channel", "column") else None  # type: ignore[return-value]

    def capacity(self, shape: Tuple[int, ...]) -> int:
        """Number of groups (or entries) the budget is counted against."""
        if self.variant == "nonstructured":
            return int(np.prod(shape))
        if self.group_axis is not None:
            return group_count(shape, self.group_axis)
        raise ValueError("quantization specs have no budget")

    def check_shape(self, shape: Tuple[int, ...]) -> None:
        if self.is_pruning and self.budget > self.capacity(shape):
            raise InfeasibleBudgetError(
                f"{self.variant} budget {self.budget} exceeds {self.capacity(shape)} groups"
            )

    def to_dict(self) -> dict:
        out = {"variant": self.variant}
        if self.is_pruning:
            out["budget"] = self.budget
        else:
            out["levels"] = list(self.levels)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ConstraintSpec":
        return cls(data["variant"], data.get("budget"), data.get("levels"))


class ProjectionResult(NamedTuple):
    projected: np.ndarray
    mask: np.ndarray
    distance: float


def _result(x: np.ndarray, z: np.ndarray, mask: np.ndarray) -> ProjectionResult:
    diff = x - z
    return ProjectionResult(z, mask, float(np.sum(diff * diff)))


def _restrict(x: np.ndarray, where: Optional[np.ndarray]) -> np.ndarray:
    if where is None:
        return x
    return np.where(np.asarray(where, dtype=bool).reshape(x.shape), x, 0.0)


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean selector of the k largest scores, lower index first on ties."""
    keep = np.zeros(scores.shape[0], dtype=bool)
    if k > 0:
        keep[np.argsort(-scores, kind="stable")[:k]] = True
    return keep


def project_nonstructured(x: np.ndarray, alpha: int, where: Optional[np.ndarray] = None) -> ProjectionResult:
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= alpha <= x.size:
        raise InfeasibleBudgetError(f"alpha={alpha} outside [0, {x.size}]")
    source = _restrict(x, where)
    keep = _top_k(np.abs(source).ravel(), alpha).reshape(x.shape)
    z = np.where(keep, source, 0.0)
    return _result(x, z, keep & (z != 0) if where is not None else keep)


def _project_groups(x: np.ndarray, axis: GroupAxis, budget: int,
                    where: Optional[np.ndarray]) -> ProjectionResult:
    x = np.asarray(x, dtype=np.float64)
    capacity = group_count(x.shape, axis)
    if not 0 <= budget <= capacity:
        raise InfeasibleBudgetError(f"{axis} budget {budget} outside [0, {capacity}]")
    source = _restrict(x, where)
    groups = group_matrix(source, axis)
    keep_groups = _top_k(np.sum(groups * groups, axis=1), budget)
    group_mask = np.broadcast_to(keep_groups[:, None], groups.shape)
    mask = from_group_matrix(np.array(group_mask), axis, x.shape)
    if where is not None:
        mask = mask & np.asarray(where, dtype=bool).reshape(x.shape)
    z = np.where(mask, source, 0.0)
    return _result(x, z, mask)


def project_filter(x: np.ndarray, beta: int, where: Optional[np.ndarray] = None) -> ProjectionResult:
    return _project_groups(x, "filter", beta, where)


def project_channel(x: np.ndarray, gamma: int, where: Optional[np.ndarray] = None) -> ProjectionResult:
    return _project_groups(x, "channel", gamma, where)


def project_column(x: np.ndarray, theta: int, where: Optional[np.ndarray] = None) -> ProjectionResult:
    return _project_groups(x, "column", theta, where)


def nearest_level(x: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Closest level per entry; an exact midpoint goes to the smaller level."""
    levels = np.asarray(levels, dtype=np.float64)
    upper = np.clip(np.searchsorted(levels, x, side="left"), 1, max(levels.size - 1, 1))
    if levels.size == 1:
        return np.full_like(x, levels[0], dtype=np.float64)
    lo, hi = levels[upper - 1], levels[upper]
    return np.where(np.abs(x - lo) <= np.abs(hi - x), lo, hi)


def project_quantization(x: np.ndarray, levels, where: Optional[np.ndarray] = None) -> ProjectionResult:
    x = np.asarray(x, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    check_equal_distance(levels)
    snapped = nearest_level(x, levels)
    if where is None:
        return _result(x, snapped, np.ones(x.shape, dtype=bool))
    selector = np.asarray(where, dtype=bool).reshape(x.shape)
    return _result(x, np.where(selector, snapped, x), selector)


def project(x: np.ndarray, spec: ConstraintSpec, where: Optional[np.ndarray] = None) -> ProjectionResult:
    """Euclidean projection of ``x`` onto the set described by ``spec``."""
    if spec.variant == "nonstructured":
        return project_nonstructured(x, spec.budget, where)
    if spec.variant == "quantization":
        return project_quantization(x, spec.levels, where)
    return _project_groups(x, spec.group_axis, spec.budget, where)


def is_feasible(x: np.ndarray, spec: ConstraintSpec, where: Optional[np.ndarray] = None) -> bool:
    """Exact membership test (counts for pruning, level membership for quantization)."""
    x = np.asarray(x, dtype=np.float64)
    if spec.variant == "nonstructured":
        return int(np.count_nonzero(x)) <= spec.budget
    if spec.variant == "quantization":
        levels = np.asarray(spec.levels)
        selector = np.ones(x.shape, bool) if where is None else np.asarray(where, bool).reshape(x.shape)
        return bool(np.all(np.isin(x[selector], levels)))
    groups = group_matrix(x, spec.group_axis)
    return int(np.count_nonzero(np.any(groups != 0, axis=1))) <= spec.budget
