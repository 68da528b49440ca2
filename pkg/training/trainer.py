"""
Training backend: forward pass, cross-entropy, autograd backpropagation and
momentum SGD, plus the ADMM subproblem-1 solver.

Frozen coordinates
------------------
Every update accepts a ``free`` mask per layer weight (True = trainable).
Frozen coordinates get a zero gradient and are restored bit-exactly after the
step, so a pruned weight stays exactly 0 and a quantized weight stays exactly
on its level through any number of steps.

ADMM quadratic term
-------------------
Subproblem 1 minimizes  f(W, b) + sum_i rho_i/2 * ||W_i - Z_i + U_i||_F^2.
The quadratic term enters as an added gradient  rho_i * (W_i - Z_i + U_i)
on each step; it is never folded into the scalar loss.
"""

import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Dict, List, Mapping, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from loguru import logger
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from models.errors import DivergenceError, NonFiniteError
from models.network import ConvNet
from training.mnist_idx import Batch, Dataset

if TYPE_CHECKING:
    from compression.admm import AdmmState

LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
Gradients = Dict[str, torch.Tensor]
FreeMasks = Mapping[str, torch.Tensor]

DIVERGENCE_FACTOR = 10.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    weight_decay: float = 0.0
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    def lr_at(self, epoch: int) -> float:
        """Step decay, counted from the start of the current training phase."""
        if self.lr_decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


class ForwardResult(NamedTuple):
    logits: torch.Tensor
    loss: torch.Tensor


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def _as_tensors(model: ConvNet, batch: Union[Batch, Tuple[torch.Tensor, torch.Tensor]]):
    dtype = next(model.parameters()).dtype
    if isinstance(batch, Batch):
        batch.check_classes(model.num_classes)
        return batch.tensors(dtype)
    x, y = batch
    return x.to(dtype), y


def forward(model: ConvNet, batch, loss_fn: LossFn = cross_entropy) -> ForwardResult:
    x, y = _as_tensors(model, batch)
    logits = model(x)
    loss = loss_fn(logits, y)
    if not torch.isfinite(loss):
        raise NonFiniteError("non-finite loss", layer=model.layer_names[-1])
    return ForwardResult(logits, loss)


def free_masks(model: ConvNet) -> Dict[str, torch.Tensor]:
    """Trainable-coordinate masks implied by the model's pruning masks."""
    return {name: mask.to(torch.bool) for name, mask in model.masks.items()}


def backward(model: ConvNet, batch, loss_fn: LossFn = cross_entropy,
             masks: Optional[FreeMasks] = None) -> Gradients:
    """Gradients of the loss for every ``<layer>.weight`` / ``<layer>.bias``."""
    model.zero_grad(set_to_none=True)
    result = forward(model, batch, loss_fn)
    result.loss.backward()
    masks = free_masks(model) if masks is None else masks
    grads: Gradients = {}
    for name in model.layer_names:
        for kind in ("weight", "bias"):
            param = getattr(model.layers[name], kind)
            grad = torch.zeros_like(param) if param.grad is None else param.grad.detach().clone()
            if kind == "weight" and name in masks:
                grad = torch.where(masks[name], grad, torch.zeros_like(grad))
            grads[f"{name}.{kind}"] = grad
    model.zero_grad(set_to_none=True)
    return grads


def _free_coordinates(mask: Optional[torch.Tensor], kind: str,
                      bias_mask: Optional[torch.Tensor] = None) -> Optional[torch.Tensor]:
    """
    Weight mask as is. A bias follows ``bias_mask`` when given, otherwise it is
    frozen once its whole filter or neuron is masked out.
    """
    if kind == "bias" and bias_mask is not None:
        return bias_mask
    if mask is None or kind == "weight":
        return mask
    return mask.reshape(mask.shape[0], -1).any(dim=1)


def _apply_sgd_(model: ConvNet, grads: Gradients, lr: float, momentum: float,
                weight_decay: float, masks: FreeMasks,
                velocity: Optional[Dict[str, torch.Tensor]],
                bias_masks: Optional[FreeMasks] = None) -> None:
    """In-place momentum SGD:  v = mu*v + (g + wd*w);  w = w - lr*v."""
    with torch.no_grad():
        for key, grad in grads.items():
            layer, kind = key.rsplit(".", 1)
            if not torch.isfinite(grad).all():
                raise NonFiniteError(f"non-finite gradient for {kind}", layer=layer)
            param = getattr(model.layers[layer], kind)
            step = grad + weight_decay * param if weight_decay else grad
            free = _free_coordinates(masks.get(layer), kind, (bias_masks or {}).get(layer))
            if free is not None:
                step = torch.where(free, step, torch.zeros_like(step))
            if momentum and velocity is not None:
                buf = velocity.get(key)
                buf = step.clone() if buf is None else buf.mul_(momentum).add_(step)
                velocity[key] = buf
                step = buf
            updated = param - lr * step
            if free is not None:
                updated = torch.where(free, updated, param)
            param.copy_(updated)


def sgd_step(model: ConvNet, gradients: Gradients, config: TrainConfig,
             masks: Optional[FreeMasks] = None,
             velocity: Optional[Dict[str, torch.Tensor]] = None,
             learning_rate: Optional[float] = None) -> ConvNet:
    """
    One momentum-SGD step on a copy of ``model``.

    ``velocity`` is the caller-owned momentum buffer (updated in place); without
    it the step is plain SGD. Masked (frozen) weights come back bit-identical.
    """
    out = copy.deepcopy(model)
    lr = config.learning_rate if learning_rate is None else learning_rate
    masks = free_masks(out) if masks is None else masks
    _apply_sgd_(out, gradients, lr, config.momentum, config.weight_decay, masks, velocity)
    return out


class RegularizerTarget(NamedTuple):
    rho: float
    target: torch.Tensor  # Z - U


def regularizer_targets(model: ConvNet, state: "AdmmState") -> Dict[str, RegularizerTarget]:
    dtype = next(model.parameters()).dtype
    return {
        name: RegularizerTarget(state.rho[name], torch.as_tensor(state.Z[name] - state.U[name], dtype=dtype))
        for name in state.layers
    }


def regularizer_value(model: ConvNet, targets: Mapping[str, RegularizerTarget]) -> float:
    """sum_i rho_i/2 * ||W_i - (Z_i - U_i)||_F^2"""
    total = 0.0
    with torch.no_grad():
        for name, reg in targets.items():
            diff = model.weight(name) - reg.target
            total += 0.5 * reg.rho * float(torch.sum(diff * diff))
    return total


def evaluate(model: ConvNet, batch: Batch, batch_size: int = 1000) -> float:
    """Top-1 accuracy in [0, 1]."""
    dtype = next(model.parameters()).dtype
    correct = 0
    with torch.no_grad():
        for start in range(0, len(batch), batch_size):
            chunk = Batch(batch.images[start:start + batch_size], batch.labels[start:start + batch_size])
            x, y = chunk.tensors(dtype)
            correct += int((model(x).argmax(dim=1) == y).sum())
    return correct / len(batch)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    regularizer: float = 0.0


class Trainer:
    """Mini-batch momentum SGD over a :class:`Dataset` with optional frozen masks and ADMM term."""

    def __init__(self, config: TrainConfig, loss_fn: LossFn = cross_entropy, progress: bool = False):
        self.config = config
        self.loss_fn = loss_fn
        self.progress = progress
        self.history: List[EpochRecord] = []

    def _loader(self, batch: Batch, dtype: torch.dtype) -> DataLoader:
        x, y = batch.tensors(dtype)
        generator = torch.Generator().manual_seed(self.config.seed)
        return DataLoader(TensorDataset(x, y), batch_size=self.config.batch_size,
                          shuffle=True, generator=generator, num_workers=0)

    def fit(
        self,
        model: ConvNet,
        dataset: Dataset,
        epochs: Optional[int] = None,
        masks: Optional[FreeMasks] = None,
        regularizer: Optional[Mapping[str, RegularizerTarget]] = None,
        log_path: Optional[Union[str, Path]] = None,
        evaluate_each_epoch: bool = True,
        bias_masks: Optional[FreeMasks] = None,
    ) -> ConvNet:
        """Train a copy of ``model``; returns the trained copy, history in ``self.history``."""
        model = copy.deepcopy(model)
        epochs = self.config.epochs if epochs is None else epochs
        dtype = next(model.parameters()).dtype
        dataset.train.check_classes(model.num_classes)
        masks = free_masks(model) if masks is None else masks
        regularizer = {k: r for k, r in (regularizer or {}).items() if r.rho != 0.0}
        loader = self._loader(dataset.train, dtype)
        velocity: Dict[str, torch.Tensor] = {}
        initial_loss: Optional[float] = None
        self.history = []

        for epoch in tqdm(range(epochs), desc="epochs", disable=not self.progress, leave=False):
            lr = self.config.lr_at(epoch)
            losses = []
            model.train()
            for x, y in loader:
                model.zero_grad(set_to_none=True)
                result = forward(model, (x, y), self.loss_fn)
                result.loss.backward()
                grads = {}
                for name in model.layer_names:
                    layer = model.layers[name]
                    for kind in ("weight", "bias"):
                        param = getattr(layer, kind)
                        grads[f"{name}.{kind}"] = (
                            torch.zeros_like(param) if param.grad is None else param.grad.detach()
                        )
                for name, reg in regularizer.items():
                    with torch.no_grad():
                        grads[f"{name}.weight"] = grads[f"{name}.weight"] + reg.rho * (model.weight(name) - reg.target)
                _apply_sgd_(model, grads, lr, self.config.momentum, self.config.weight_decay, masks, velocity,
                            bias_masks)
                loss = float(result.loss.detach())
                if initial_loss is None:
                    initial_loss = loss
                losses.append(loss)

            mean_loss = float(np.mean(losses))
            if initial_loss is not None and mean_loss > DIVERGENCE_FACTOR * max(initial_loss, 1e-12):
                raise DivergenceError(
                    f"epoch {epoch}: mean loss {mean_loss:.4g} exceeds {DIVERGENCE_FACTOR:g}x "
                    f"initial loss {initial_loss:.4g}"
                )
            model.eval()
            accuracy = evaluate(model, dataset.test) if evaluate_each_epoch else math.nan
            record = EpochRecord(epoch, mean_loss, accuracy, regularizer_value(model, regularizer))
            self.history.append(record)
            logger.debug(f"epoch {epoch}: lr={lr:.4g} loss={mean_loss:.4f} acc={accuracy:.4f}")

        if log_path is not None:
            write_history(self.history, log_path)
        return model


def write_history(history: List[EpochRecord], path: Union[str, Path], append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([vars(r) for r in history], columns=["epoch", "loss", "accuracy", "regularizer"])
    frame.to_csv(path, mode="a" if append and path.exists() else "w",
                 header=not (append and path.exists()), index=False)


def solve_subproblem1(model: ConvNet, admm_state: "AdmmState", dataset: Dataset, config: TrainConfig,
                      epochs: Optional[int] = None, loss_fn: LossFn = cross_entropy,
                      masks: Optional[FreeMasks] = None,
                      trainer: Optional[Trainer] = None) -> ConvNet:
    """Minimize loss + sum_i rho_i/2 ||W_i - Z_i^k + U_i^k||_F^2 for the configured epoch budget."""
    trainer = trainer or Trainer(config, loss_fn)
    targets = regularizer_targets(model, admm_state)
    return trainer.fit(model, dataset, epochs=epochs, masks=masks, regularizer=targets)
