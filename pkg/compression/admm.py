"""
ADMM regularization and masked mapping / retraining.

One ADMM iteration k, for every constrained layer i:
    W^{k+1} = argmin f(W, b) + rho_i/2 ||W - Z^k + U^k||_F^2        (trainer, SGD)
    Z^{k+1} = Proj_{S_i}(W^{k+1} + U^k)                              (closed form)
    U^{k+1} = U^k + (W^{k+1} - Z^{k+1})                              (dual update)
    rho_i  *= growth

After regularization the masked-mapping step projects W onto S_i for real,
freezes the resulting pattern and retrains the free weights, so the final model
is exactly feasible.
"""

import copy
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Union

import numpy as np
import torch
from loguru import logger
from tqdm import tqdm

from compression.projections import ConstraintSpec, is_feasible, nearest_level, project
from models.errors import AccuracyCollapseError, CheckpointError, InfeasibleBudgetError
from models.network import ConvNet, propagate_filter_pruning, with_weights
from training.mnist_idx import Dataset
from training.trainer import TrainConfig, Trainer, cross_entropy, evaluate, solve_subproblem1

COLLAPSE_POINTS = 0.20
RESIDUAL_GROWTH_PATIENCE = 3


@dataclass(frozen=True)
class RhoSchedule:
    initial: float = 1.5e-3
    growth: float = 1.5
    max_iterations: int = 12
    tolerance: float = 0.0

    def __post_init__(self):
        if not self.initial > 0:
            raise ValueError(f"initial rho must be > 0, got {self.initial}")
        if self.growth < 1.0:
            raise ValueError(f"rho growth factor must be >= 1, got {self.growth}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")

    def rho_at(self, iteration: int) -> float:
        return self.initial * self.growth ** iteration


@dataclass
class AdmmState:
    """Per-layer (W, Z, U, rho) plus iteration bookkeeping."""

    specs: Dict[str, ConstraintSpec]
    W: Dict[str, np.ndarray]
    Z: Dict[str, np.ndarray]
    U: Dict[str, np.ndarray]
    rho: Dict[str, float]
    where: Dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    residuals: List[Dict[str, float]] = field(default_factory=list)
    relative_residuals: List[Dict[str, float]] = field(default_factory=list)
    rho_trace: List[Dict[str, float]] = field(default_factory=list)
    accuracy: List[float] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def layers(self) -> List[str]:
        return list(self.specs)

    def max_relative_residual(self) -> float:
        if not self.relative_residuals:
            return math.inf
        return max(self.relative_residuals[-1].values(), default=0.0)

    def to_manifest(self) -> dict:
        return {
            "iteration": self.iteration,
            "specs": {name: spec.to_dict() for name, spec in self.specs.items()},
            "rho": self.rho,
            "residuals": self.residuals,
            "relative_residuals": self.relative_residuals,
            "rho_trace": self.rho_trace,
            "accuracy": self.accuracy,
            "warnings": self.warnings,
        }


def init_admm_state(weights: Mapping[str, np.ndarray], specs: Mapping[str, ConstraintSpec],
                    schedule: RhoSchedule,
                    where: Optional[Mapping[str, np.ndarray]] = None) -> AdmmState:
    """Z^0 = Proj(W^0), U^0 = 0."""
    where = dict(where or {})
    W, Z, U = {}, {}, {}
    for name, spec in specs.items():
        w = np.asarray(weights[name], dtype=np.float64)
        spec.check_shape(w.shape)
        W[name] = w.copy()
        Z[name] = project(w, spec, where.get(name)).projected
        U[name] = np.zeros_like(w)
    rho = {name: schedule.rho_at(0) for name in specs}
    return AdmmState(dict(specs), W, Z, U, rho, where)


def admm_update(state: AdmmState, new_weights: Mapping[str, np.ndarray],
                schedule: RhoSchedule) -> AdmmState:
    """Z- and U-updates for one iteration given the subproblem-1 solution; returns a new state."""
    out = copy.deepcopy(state)
    residuals, relative = {}, {}
    for name, spec in state.specs.items():
        w = np.asarray(new_weights[name], dtype=np.float64).reshape(state.W[name].shape)
        z = project(w + state.U[name], spec, state.where.get(name)).projected
        dual_step = w - z
        out.W[name] = w.copy()
        out.Z[name] = z
        out.U[name] = state.U[name] + dual_step
        residuals[name] = float(np.linalg.norm(dual_step))
        norm_w = float(np.linalg.norm(w))
        relative[name] = residuals[name] / norm_w if norm_w > 0 else 0.0
    out.iteration = state.iteration + 1
    out.residuals.append(residuals)
    out.relative_residuals.append(relative)
    out.rho_trace.append(dict(state.rho))
    out.rho = {name: schedule.rho_at(out.iteration) for name in state.specs}
    _check_residual_growth(out)
    return out


def _check_residual_growth(state: AdmmState) -> None:
    history = state.residuals[-(RESIDUAL_GROWTH_PATIENCE + 1):]
    if len(history) <= RESIDUAL_GROWTH_PATIENCE:
        return
    for name in state.specs:
        trace = [r[name] for r in history]
        if all(b > a for a, b in zip(trace, trace[1:])):
            message = (f"iteration {state.iteration}: residual of {name} grew "
                       f"{RESIDUAL_GROWTH_PATIENCE} iterations in a row")
            logger.warning(message)
            state.warnings.append(message)


def model_support(model: ConvNet) -> Dict[str, np.ndarray]:
    """Surviving coordinates per masked layer; earlier zeros are never revived."""
    return {name: model.mask_array(name) for name in model.masks}


IterationCallback = Callable[[ConvNet, AdmmState], None]


def admm_regularize(
    model: ConvNet,
    specs: Mapping[str, ConstraintSpec],
    dataset: Dataset,
    schedule: RhoSchedule,
    config: TrainConfig,
    where: Optional[Mapping[str, np.ndarray]] = None,
    state: Optional[AdmmState] = None,
    on_iteration: Optional[IterationCallback] = None,
    loss_fn=cross_entropy,
    progress: bool = False,
) -> "tuple[ConvNet, AdmmState]":
    """
    Run ADMM regularization; ``config.epochs`` is the total budget for the round,
    split evenly over ``schedule.max_iterations``.

    Passing ``state`` resumes from its iteration counter. With no constrained
    layer this is plain training for ``config.epochs`` epochs.
    """
    trainer = Trainer(config, loss_fn, progress=False)
    if not specs:
        logger.info("no constrained layers: plain training")
        trained = trainer.fit(model, dataset)
        return trained, AdmmState({}, {}, {}, {}, {})

    if where is None:
        where = model_support(model)
    if state is None:
        state = init_admm_state(model.weight_arrays(), specs, schedule, where)
    epochs_per_iteration = max(1, config.epochs // schedule.max_iterations)
    logger.info(
        f"ADMM: {len(specs)} layers, {schedule.max_iterations} iterations x "
        f"{epochs_per_iteration} epochs, rho0={schedule.initial:g} growth={schedule.growth:g}"
    )

    for _ in tqdm(range(state.iteration, schedule.max_iterations), desc="ADMM", disable=not progress):
        model = solve_subproblem1(model, state, dataset, config, epochs=epochs_per_iteration,
                                  loss_fn=loss_fn, trainer=trainer)
        state = admm_update(state, model.weight_arrays(), schedule)
        accuracy = trainer.history[-1].accuracy if trainer.history else math.nan
        state.accuracy.append(accuracy)
        logger.info(
            f"ADMM iteration {state.iteration}: max rel. residual {state.max_relative_residual():.3e}, "
            f"accuracy {accuracy:.4f}"
        )
        if on_iteration is not None:
            on_iteration(model, state)
        if schedule.tolerance > 0 and state.max_relative_residual() <= schedule.tolerance:
            logger.info(f"converged after {state.iteration} iterations")
            break
    return model, state


def _guard_collapse(accuracy: float, baseline_accuracy: Optional[float], stage: str) -> None:
    if baseline_accuracy is not None and accuracy < baseline_accuracy - COLLAPSE_POINTS:
        raise AccuracyCollapseError(
            f"{stage}: accuracy {accuracy:.4f} fell more than {COLLAPSE_POINTS * 100:.0f} points "
            f"below baseline {baseline_accuracy:.4f}"
        )


def masked_map_retrain_prune(
    model: ConvNet,
    specs: Mapping[str, ConstraintSpec],
    dataset: Dataset,
    config: TrainConfig,
    epochs: Optional[int] = None,
    where: Optional[Mapping[str, np.ndarray]] = None,
    baseline_accuracy: Optional[float] = None,
    propagate_filters: bool = False,
) -> ConvNet:
    """
    Project onto the pruning sets, fix the zero pattern, retrain the survivors.

    With ``propagate_filters`` every filter that ends up all-zero also removes
    its bias and the input channel it feeds in the next layer.
    """
    where = model_support(model) if where is None else dict(where)
    weights, masks = {}, {}
    for name, spec in specs.items():
        if not spec.is_pruning:
            raise InfeasibleBudgetError(f"{name}: masked pruning needs a pruning spec, got {spec.variant}")
        res = project(model.weight_arrays()[name], spec, where.get(name))
        weights[name] = res.projected
        masks[name] = res.mask
    mapped = with_weights(model, weights, masks)
    if propagate_filters:
        for name in specs:
            w = mapped.weight_arrays()[name]
            dead = np.flatnonzero(~np.any(w.reshape(w.shape[0], -1) != 0, axis=1))
            mapped = propagate_filter_pruning(mapped, name, dead)
    retrained = Trainer(config).fit(mapped, dataset, epochs=epochs)

    final = retrained.weight_arrays()
    for name, spec in specs.items():
        if not is_feasible(final[name], spec):
            raise InfeasibleBudgetError(f"{name} left its {spec.variant} set after retraining")
    accuracy = evaluate(retrained, dataset.test)
    _guard_collapse(accuracy, baseline_accuracy, "masked pruning retrain")
    logger.info(f"masked mapping + retrain (pruning): accuracy {accuracy:.4f}")
    return retrained


def _live_rows(mask: Optional[np.ndarray], shape) -> np.ndarray:
    """Filters (or neurons) with at least one unpruned weight."""
    if mask is None:
        return np.ones(shape[0], dtype=bool)
    return mask.reshape(mask.shape[0], -1).any(axis=1)


def masked_map_retrain_quant(
    model: ConvNet,
    levels: Mapping[str, np.ndarray],
    epsilon: float,
    dataset: Dataset,
    config: TrainConfig,
    epochs: Optional[int] = None,
    baseline_accuracy: Optional[float] = None,
    absorb_zeros: bool = False,
) -> ConvNet:
    """
    Three-phase quantization mapping.

    1. weights within ``epsilon * spacing`` of a level are snapped and frozen;
    2. the remaining free weights are retrained;
    3. everything left is snapped to its nearest level.

    Pruned coordinates (model masks) stay exactly zero throughout. With
    ``absorb_zeros`` a surviving weight that lands on the zero level joins
    the pruned set.
    """
    weights = model.weight_arrays()
    snapped, free = {}, {}
    levels = {name: model.representable(name, lv) for name, lv in levels.items()}
    for name, lv in levels.items():
        spacing = float(lv[1] - lv[0]) if lv.size > 1 else math.inf
        alive = model.mask_array(name)
        alive = np.ones(weights[name].shape, bool) if alive is None else alive
        q = nearest_level(weights[name], lv)
        close = (np.abs(weights[name] - q) <= epsilon * spacing) & alive
        snapped[name] = np.where(close, q, weights[name])
        free[name] = alive & ~close
        logger.debug(f"{name}: {int(close.sum())} of {int(alive.sum())} weights snapped in phase 1")

    phase1 = with_weights(model, snapped)
    free_masks = {name: torch.as_tensor(mask) for name, mask in free.items()}
    for name, mask in phase1.masks.items():
        free_masks.setdefault(name, mask.to(torch.bool))
    # biases follow the pruning mask, not the snap mask
    bias_masks = {
        name: torch.as_tensor(_live_rows(phase1.mask_array(name), phase1.weight(name).shape))
        for name in free_masks
    }
    if any(mask.any() for mask in free.values()):
        phase2 = Trainer(config).fit(phase1, dataset, epochs=epochs, masks=free_masks, bias_masks=bias_masks)
    else:
        phase2 = phase1

    weights = phase2.weight_arrays()
    final_weights, final_masks = {}, {}
    for name, lv in levels.items():
        alive = phase2.mask_array(name)
        alive = np.ones(weights[name].shape, bool) if alive is None else alive
        final_weights[name] = np.where(alive, nearest_level(weights[name], lv), 0.0)
        if absorb_zeros:
            final_masks[name] = alive & (final_weights[name] != 0)
        elif phase2.mask_array(name) is not None:
            final_masks[name] = alive
    quantized = with_weights(phase2, final_weights, final_masks)
    for name, lv in levels.items():
        quantized.levels[name] = lv

    accuracy = evaluate(quantized, dataset.test)
    _guard_collapse(accuracy, baseline_accuracy, "masked quantization retrain")
    logger.info(f"masked mapping + retrain (quantization): accuracy {accuracy:.4f}")
    return quantized


def save_state(state: AdmmState, path: Union[str, Path]) -> Path:
    """Persist an ADMM state for resume (.npz with a JSON manifest entry)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"manifest": np.array(json.dumps(state.to_manifest()))}
    for name in state.specs:
        arrays[f"W.{name}"] = state.W[name]
        arrays[f"Z.{name}"] = state.Z[name]
        arrays[f"U.{name}"] = state.U[name]
        if name in state.where:
            arrays[f"where.{name}"] = np.asarray(state.where[name], dtype=bool)
    buffer = io.BytesIO()
    np.savez_compressed(buffer, **arrays)
    path.write_bytes(buffer.getvalue())
    return path


def load_state(path: Union[str, Path]) -> AdmmState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"ADMM state not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {key: data[key] for key in data.files}
    manifest = json.loads(str(arrays["manifest"]))
    specs = {name: ConstraintSpec.from_dict(d) for name, d in manifest["specs"].items()}
    return AdmmState(
        specs=specs,
        W={name: arrays[f"W.{name}"] for name in specs},
        Z={name: arrays[f"Z.{name}"] for name in specs},
        U={name: arrays[f"U.{name}"] for name in specs},
        rho={name: float(v) for name, v in manifest["rho"].items()},
        where={name: arrays[f"where.{name}"] for name in specs if f"where.{name}" in arrays},
        iteration=int(manifest["iteration"]),
        residuals=manifest["residuals"],
        relative_residuals=manifest["relative_residuals"],
        rho_trace=manifest["rho_trace"],
        accuracy=manifest["accuracy"],
        warnings=manifest["warnings"],
    )
