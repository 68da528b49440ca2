"""
Compression plans: per-layer targets for the two progressive pruning rounds.

The budget heuristic starts from known per-layer pruning rates (e.g. from an
earlier heuristic pruning run): round 1 targets 1.5x that rate and round 2
doubles round 1. A rate r on a layer with n groups becomes a budget of
floor(n / r), clamped to at least one surviving group.
"""

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Dict, Mapping, Optional, Tuple

from loguru import logger

from compression.projections import ConstraintSpec, Variant
from models.errors import InfeasibleBudgetError

ROUND1_FACTOR = 1.5
ROUND2_FACTOR = 2.0


@dataclass(frozen=True)
class CompressionPlan:
    round1: Dict[str, ConstraintSpec]
    round2: Dict[str, ConstraintSpec] = field(default_factory=dict)
    admm_epochs: int = 12
    retrain_epochs: int = 4
    epsilon: float = 0.2

    def __post_init__(self):
        if self.admm_epochs < 1 or self.retrain_epochs < 0:
            raise ValueError("admm_epochs must be >= 1 and retrain_epochs >= 0")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        for name, spec in self.round2.items():
            first = self.round1.get(name)
            if first is None:
                raise InfeasibleBudgetError(f"{name}: round-2 target without a round-1 target")
            if first.variant != spec.variant:
                raise InfeasibleBudgetError(
                    f"{name}: round 2 uses {spec.variant} but round 1 used {first.variant}"
                )
            if spec.is_pruning and spec.budget > first.budget:
                raise InfeasibleBudgetError(
                    f"{name}: round-2 budget {spec.budget} exceeds round-1 budget {first.budget}"
                )

    @property
    def rounds(self) -> Tuple[Dict[str, ConstraintSpec], ...]:
        return (self.round1, self.round2) if self.round2 else (self.round1,)

    def to_dict(self) -> dict:
        return {
            "round1": {name: spec.to_dict() for name, spec in self.round1.items()},
            "round2": {name: spec.to_dict() for name, spec in self.round2.items()},
            "admm_epochs": self.admm_epochs,
            "retrain_epochs": self.retrain_epochs,
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CompressionPlan":
        return cls(
            round1={n: ConstraintSpec.from_dict(d) for n, d in data.get("round1", {}).items()},
            round2={n: ConstraintSpec.from_dict(d) for n, d in data.get("round2", {}).items()},
            admm_epochs=data.get("admm_epochs", 12),
            retrain_epochs=data.get("retrain_epochs", 4),
            epsilon=data.get("epsilon", 0.2),
        )


def rate_to_budget(capacity: int, rate: float, layer: str = "") -> int:
    """
    floor(capacity / rate), never below one survivor. The rate is read as the
    nearest small fraction, so 1.1 * 1.5 divides like 33/20.
    """
    if rate < 1:
        raise ValueError(f"{layer}: pruning rate must be >= 1, got {rate}")
    budget = math.floor(capacity / Fraction(rate).limit_denominator())
    if budget < 1:
        logger.warning(f"{layer}: rate {rate:g} on {capacity} groups leaves nothing; keeping 1")
        budget = 1
    return budget


def uniform_rates(layers, rate: float) -> Dict[str, float]:
    return {name: float(rate) for name in layers}


def derive_plan(
    prior_rates: Mapping[str, float],
    shapes: Mapping[str, Tuple[int, ...]],
    variant: Variant = "nonstructured",
    margin: float = 1.0,
    admm_epochs: int = 12,
    retrain_epochs: int = 4,
    epsilon: float = 0.2,
) -> CompressionPlan:
    """
    Two-round plan from prior per-layer rates.

    ``margin`` scales the round-2 rate further when a finished run shows accuracy
    headroom; 1.0 keeps the plain doubling.
    """
    if margin < 1.0:
        raise ValueError(f"margin must be >= 1, got {margin}")
    round1, round2 = {}, {}
    for name, prior in prior_rates.items():
        if prior < 1:
            raise ValueError(f"{name}: prior rate must be >= 1, got {prior}")
        capacity = ConstraintSpec(variant, budget=0).capacity(tuple(shapes[name]))
        first = ROUND1_FACTOR * prior
        second = ROUND2_FACTOR * first * margin
        round1[name] = ConstraintSpec(variant, budget=rate_to_budget(capacity, first, name))
        round2[name] = ConstraintSpec(
            variant, budget=min(rate_to_budget(capacity, second, name), round1[name].budget)
        )
        logger.debug(f"{name}: prior {prior:g}x -> {first:g}x ({round1[name].budget}) "
                     f"-> {second:g}x ({round2[name].budget}) of {capacity}")
    return CompressionPlan(round1, round2, admm_epochs, retrain_epochs, epsilon)


def single_round_plan(rates: Mapping[str, float], shapes: Mapping[str, Tuple[int, ...]],
                      variant: Variant, admm_epochs: int = 12, retrain_epochs: int = 4,
                      epsilon: float = 0.2) -> CompressionPlan:
    round1 = {}
    for name, rate in rates.items():
        capacity = ConstraintSpec(variant, budget=0).capacity(tuple(shapes[name]))
        round1[name] = ConstraintSpec(variant, budget=rate_to_budget(capacity, rate, name))
    return CompressionPlan(round1, {}, admm_epochs, retrain_epochs, epsilon)


def plan_rates(plan: CompressionPlan, shapes: Mapping[str, Tuple[int, ...]],
               round_index: int = -1) -> Dict[str, Optional[float]]:
    """Effective per-layer rate (capacity / budget) of a plan round."""
    specs = plan.rounds[round_index]
    out: Dict[str, Optional[float]] = {}
    for name, spec in specs.items():
        out[name] = spec.capacity(tuple(shapes[name])) / spec.budget if spec.budget else None
    return out


def two_round_plan(rates: Mapping[str, float], shapes: Mapping[str, Tuple[int, ...]],
                   variant: Variant, admm_epochs: int = 12, retrain_epochs: int = 4,
                   epsilon: float = 0.2) -> CompressionPlan:
    """Progressive plan without prior rates: round 1 at half the target rate, round 2 at the target."""
    first = single_round_plan({name: max(1.0, rate / 2) for name, rate in rates.items()}, shapes, variant,
                              admm_epochs, retrain_epochs, epsilon)
    last = single_round_plan(rates, shapes, variant, admm_epochs, retrain_epochs, epsilon)
    return replace(first, round2=last.round1)
