"""
Progressive two-round pruning.

Round 1 runs ADMM regularization + masked mapping at the round-1 budgets.
Its zeros become the frozen support of round 2, which tightens the budgets
without ever reviving a pruned weight.
"""

from dataclasses import replace
from functools import partial
from typing import Callable, List, Optional

import numpy as np
from loguru import logger

from compression.admm import (
    AdmmState,
    RhoSchedule,
    admm_regularize,
    masked_map_retrain_prune,
    model_support,
)
from compression.plan import CompressionPlan
from models.errors import InfeasibleBudgetError
from models.network import ConvNet, pruning_rate
from models.weights import count_nonzero_groups
from training.mnist_idx import Dataset
from training.trainer import TrainConfig, evaluate

RoundCallback = Callable[[int, ConvNet, AdmmState], None]


def _check_round2_support(model: ConvNet, plan: CompressionPlan) -> None:
    """Round 2 keeps at most what round 1 left alive, counted in the round-2 variant's units."""
    for name, spec in plan.round2.items():
        mask = model.mask_array(name)
        alive = model.weight_arrays()[name] if mask is None else mask.astype(np.float64)
        if spec.variant == "nonstructured":
            survivors = int(np.count_nonzero(alive))
        else:
            survivors = count_nonzero_groups(alive, spec.variant)
        if spec.budget > survivors:
            raise InfeasibleBudgetError(
                f"{name}: round-2 {spec.variant} budget {spec.budget} exceeds the {survivors} round-1 survivors"
            )


def progressive_prune(
    model: ConvNet,
    plan: CompressionPlan,
    dataset: Dataset,
    schedule: RhoSchedule,
    config: TrainConfig,
    baseline_accuracy: Optional[float] = None,
    on_round: Optional[RoundCallback] = None,
    propagate_filters: bool = False,
    progress: bool = False,
    on_iteration: Optional[RoundCallback] = None,
    start_round: int = 1,
    resume_state: Optional[AdmmState] = None,
) -> "tuple[ConvNet, List[AdmmState]]":
    """
    Run every round of ``plan``; returns the final model and one ADMM state per round.

    ``start_round`` and ``resume_state`` continue an interrupted run: earlier rounds
    are taken as done (their masks live in ``model``) and ADMM of ``start_round``
    picks up at the iteration stored in ``resume_state``.
    """
    if not plan.round1:
        raise InfeasibleBudgetError("compression plan has no round-1 targets")
    admm_config = replace(config, epochs=plan.admm_epochs)
    states: List[AdmmState] = []
    for index, specs in enumerate(plan.rounds, start=1):
        if index < start_round:
            continue
        if index == 2:
            _check_round2_support(model, plan)
        state = resume_state if index == start_round else None
        support = state.where if state is not None else model_support(model)
        logger.info(f"pruning round {index}: {len(specs)} layers")
        callback = partial(on_iteration, index) if on_iteration is not None else None
        model, state = admm_regularize(model, specs, dataset, schedule, admm_config, where=support,
                                       state=state, on_iteration=callback, progress=progress)
        model = masked_map_retrain_prune(model, specs, dataset, config, epochs=plan.retrain_epochs,
                                         where=support, baseline_accuracy=baseline_accuracy,
                                         propagate_filters=propagate_filters)
        states.append(state)
        logger.info(f"round {index}: rate {float(pruning_rate(model)):.2f}x, "
                    f"accuracy {evaluate(model, dataset.test):.4f}")
        if on_round is not None:
            on_round(index, model, state)
    return model, states
