"""
CONV/FC network used by every compression pipeline.

Layers are described by a small registry of ``LayerSpec`` tuples so that
checkpoints, compaction and the storage analyzer agree on shapes without
inspecting module internals.

Pruned structures stay in place as exact zeros plus a boolean mask
(``ConvNet.masks``) until ``compact`` removes them physically; this keeps ADMM
variable shapes fixed across iterations.
"""

import copy
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Dict, Iterable, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger

from models.errors import NonFiniteError, ShapeError
from models.weights import BiasVector, LayerKind, WeightTensor, compression_ratio

Scope = Literal["all", "conv"]


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: LayerKind
    in_units: int
    out_units: int
    kernel: int = 1
    padding: int = 0
    activation: Literal["relu", "none"] = "relu"
    pooling: Literal["max2", "none"] = "none"

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == "conv":
            return (self.out_units, self.in_units, self.kernel, self.kernel)
        return (self.out_units, self.in_units)


ARCHITECTURES: Dict[str, Tuple[LayerSpec, ...]] = {
    # 6/16 LeNet-5; padded conv1 gives conv2 a 16x5x5 = 400 feature output.
    "lenet5": (
        LayerSpec("conv1", "conv", 1, 6, kernel=5, padding=2, pooling="max2"),
        LayerSpec("conv2", "conv", 6, 16, kernel=5, pooling="max2"),
        LayerSpec("fc1", "fc", 400, 120),
        LayerSpec("fc2", "fc", 120, 84),
        LayerSpec("fc3", "fc", 84, 10, activation="none"),
    ),
    # 20/50 LeNet-5 with 25.5K CONV weights, as in the published comparison table.
    "lenet5-wide": (
        LayerSpec("conv1", "conv", 1, 20, kernel=5, pooling="max2"),
        LayerSpec("conv2", "conv", 20, 50, kernel=5, pooling="max2"),
        LayerSpec("fc1", "fc", 800, 500),
        LayerSpec("fc2", "fc", 500, 10, activation="none"),
    ),
}

INPUT_SHAPE = (1, 28, 28)


class LayerRecord(NamedTuple):
    spec: LayerSpec
    weight: WeightTensor
    bias: BiasVector


class ConvNet(nn.Module):
    """Sequential CONV -> FC classifier built from ``LayerSpec`` entries."""

    def __init__(
        self,
        specs: Sequence[LayerSpec],
        input_shape: Tuple[int, int, int] = INPUT_SHAPE,
        arch: str = "custom",
        dense_specs: Optional[Sequence[LayerSpec]] = None,
    ):
        super().__init__()
        self.specs: Tuple[LayerSpec, ...] = tuple(specs)
        self.dense_specs: Tuple[LayerSpec, ...] = tuple(dense_specs or specs)
        self.input_shape = tuple(input_shape)
        self.arch = arch
        self.layers = nn.ModuleDict()
        for spec in self.specs:
            if spec.kind == "conv":
                self.layers[spec.name] = nn.Conv2d(
                    spec.in_units, spec.out_units, spec.kernel, padding=spec.padding
                )
            else:
                self.layers[spec.name] = nn.Linear(spec.in_units, spec.out_units)
        self.masks: Dict[str, torch.Tensor] = {}
        self.levels: Dict[str, np.ndarray] = {}
        self.feature_shapes = self._trace_shapes()

    def _trace_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Output shape (per sample) of every layer; validates that layers compose."""
        shape: Tuple[int, ...] = self.input_shape
        shapes = {}
        for spec in self.specs:
            if spec.kind == "conv":
                if len(shape) != 3 or shape[0] != spec.in_units:
                    raise ShapeError(f"{spec.name} expects {spec.in_units} channels, gets {shape}")
                h = shape[1] + 2 * spec.padding - spec.kernel + 1
                w = shape[2] + 2 * spec.padding - spec.kernel + 1
                if spec.pooling == "max2":
                    h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise ShapeError(f"{spec.name} leaves an empty feature map")
                shape = (spec.out_units, h, w)
            else:
                flat = int(np.prod(shape))
                if flat != spec.in_units:
                    raise ShapeError(f"{spec.name} expects {spec.in_units} inputs, gets {flat}")
                shape = (spec.out_units,)
            shapes[spec.name] = shape
        return shapes

    @property
    def layer_names(self) -> List[str]:
        return [spec.name for spec in self.specs]

    @property
    def num_classes(self) -> int:
        return self.specs[-1].out_units

    def spec(self, name: str) -> LayerSpec:
        for spec in self.specs:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def weight(self, name: str) -> torch.Tensor:
        return self.layers[name].weight

    def bias(self, name: str) -> torch.Tensor:
        return self.layers[name].bias

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for spec in self.specs:
            layer = self.layers[spec.name]
            if spec.kind == "fc" and x.dim() > 2:
                x = torch.flatten(x, 1)
            x = layer(x)
            if spec.activation == "relu":
                x = F.relu(x)
            if spec.pooling == "max2":
                x = F.max_pool2d(x, 2)
            if not torch.isfinite(x).all():
                raise NonFiniteError("non-finite activation", layer=spec.name)
        return x

    def layer_records(self) -> List[LayerRecord]:
        records = []
        for spec in self.specs:
            layer = self.layers[spec.name]
            records.append(LayerRecord(
                spec,
                WeightTensor(layer.weight.detach().cpu().numpy(), spec.kind, spec.name),
                BiasVector(layer.bias.detach().cpu().numpy()),
            ))
        return records

    def weight_arrays(self) -> Dict[str, np.ndarray]:
        return {
            spec.name: self.layers[spec.name].weight.detach().cpu().numpy().astype(np.float64)
            for spec in self.specs
        }

    def representable(self, name: str, values: np.ndarray) -> np.ndarray:
        """``values`` rounded through the dtype of layer ``name``'s weight, as float64."""
        dtype = self.layers[name].weight.dtype
        return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=dtype).to(torch.float64).numpy()

    def mask_array(self, name: str) -> Optional[np.ndarray]:
        mask = self.masks.get(name)
        return None if mask is None else mask.cpu().numpy().astype(bool)

    def dense_weight_count(self, scope: Scope = "all") -> int:
        return sum(
            int(np.prod(spec.weight_shape))
            for spec in self.dense_specs
            if scope == "all" or spec.kind == "conv"
        )


def build_model(arch: str = "lenet5", seed: int = 0, dtype: torch.dtype = torch.float64) -> ConvNet:
    if arch not in ARCHITECTURES:
        raise KeyError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
    torch.manual_seed(seed)
    model = ConvNet(ARCHITECTURES[arch], arch=arch)
    return model.to(dtype)


def with_weights(model: ConvNet, weights: Dict[str, np.ndarray],
                 masks: Optional[Dict[str, np.ndarray]] = None) -> ConvNet:
    """Copy of ``model`` with the given layer weights (and masks) substituted."""
    out = copy.deepcopy(model)
    with torch.no_grad():
        for name, values in weights.items():
            param = out.weight(name)
            param.copy_(torch.as_tensor(np.asarray(values).reshape(param.shape), dtype=param.dtype))
    for name, mask in (masks or {}).items():
        out.masks[name] = torch.as_tensor(np.asarray(mask, dtype=bool).reshape(out.weight(name).shape))
    return out


def _downstream_slices(model: ConvNet, index: int, units: Iterable[int]) -> List[slice]:
    """Input positions of layer ``index + 1`` fed by output units of layer ``index``."""
    spec = model.specs[index]
    nxt = model.specs[index + 1]
    if spec.kind == "conv" and nxt.kind == "fc":
        per_map = int(np.prod(model.feature_shapes[spec.name][1:]))
        return [slice(u * per_map, (u + 1) * per_map) for u in units]
    return [slice(u, u + 1) for u in units]


def _layer_index(model: ConvNet, layer: Union[int, str]) -> int:
    if isinstance(layer, str):
        return model.layer_names.index(layer)
    if not 0 <= layer < len(model.specs):
        raise IndexError(f"layer index {layer} out of range")
    return layer


def propagate_filter_pruning(model: ConvNet, layer: Union[int, str],
                             removed_filters: Iterable[int]) -> ConvNet:
    """
    Remove filters of one layer and the channels they feed in the next layer.

    The removed filters (weights and bias) and the matching input channels of
    the following layer are zeroed and masked out. Nothing else changes, so a
    network whose removed filters were already exactly zero computes the same
    function afterwards.
    """
    index = _layer_index(model, layer)
    removed = sorted(set(int(f) for f in removed_filters))
    out = copy.deepcopy(model)
    if not removed:
        return out
    spec = out.specs[index]
    if any(f < 0 or f >= spec.out_units for f in removed):
        raise IndexError(f"{spec.name} has {spec.out_units} filters, got {removed}")
    if index == len(out.specs) - 1:
        logger.warning(f"{spec.name} is the last layer; filter removal is not propagated")
        return out

    with torch.no_grad():
        weight = out.weight(spec.name)
        mask = out.masks.get(spec.name, torch.ones_like(weight, dtype=torch.bool)).clone()
        weight[removed] = 0.0
        mask[removed] = False
        out.bias(spec.name)[removed] = 0.0
        out.masks[spec.name] = mask

        nxt = out.specs[index + 1]
        nxt_weight = out.weight(nxt.name)
        nxt_mask = out.masks.get(nxt.name, torch.ones_like(nxt_weight, dtype=torch.bool)).clone()
        for cols in _downstream_slices(out, index, removed):
            nxt_weight[:, cols] = 0.0
            nxt_mask[:, cols] = False
        out.masks[nxt.name] = nxt_mask
    logger.debug(f"{spec.name}: removed filters {removed}, zeroed matching inputs of {nxt.name}")
    return out


def compact(model: ConvNet) -> ConvNet:
    """
    Physically drop output units whose every downstream input weight is zero.

    The result computes the same logits as ``model``. Input channels of the
    first layer and the class outputs of the last layer are never removed.
    """
    keep: Dict[str, np.ndarray] = {}
    for index, spec in enumerate(model.specs[:-1]):
        nxt = model.specs[index + 1]
        nxt_w = model.weight(nxt.name).detach().cpu().numpy()
        alive = []
        for unit, cols in enumerate(_downstream_slices(model, index, range(spec.out_units))):
            if np.any(nxt_w[:, cols] != 0):
                alive.append(unit)
        keep[spec.name] = np.array(alive, dtype=np.int64)
    keep[model.specs[-1].name] = np.arange(model.specs[-1].out_units)

    new_specs = []
    in_keep = np.arange(model.specs[0].in_units)
    for index, spec in enumerate(model.specs):
        out_keep = keep[spec.name]
        if index > 0:
            prev = model.specs[index - 1]
            if prev.kind == "conv" and spec.kind == "fc":
                per_map = int(np.prod(model.feature_shapes[prev.name][1:]))
                in_keep = np.concatenate(
                    [np.arange(u * per_map, (u + 1) * per_map) for u in keep[prev.name]]
                ) if len(keep[prev.name]) else np.zeros(0, dtype=np.int64)
            else:
                in_keep = keep[prev.name]
        new_specs.append((replace(spec, in_units=len(in_keep), out_units=len(out_keep)), in_keep, out_keep))

    dtype = next(model.parameters()).dtype
    out = ConvNet([s for s, _, _ in new_specs], model.input_shape, model.arch, model.dense_specs).to(dtype)
    with torch.no_grad():
        for spec, in_keep, out_keep in new_specs:
            rows = torch.as_tensor(out_keep, dtype=torch.long)
            cols = torch.as_tensor(in_keep, dtype=torch.long)
            src_w = model.weight(spec.name).detach()
            out.weight(spec.name).copy_(src_w[rows][:, cols])
            out.bias(spec.name).copy_(model.bias(spec.name).detach()[rows])
            if spec.name in model.masks:
                out.masks[spec.name] = model.masks[spec.name][rows][:, cols].clone()
            if spec.name in model.levels:
                out.levels[spec.name] = model.levels[spec.name].copy()
    logger.info(
        "compacted: " + ", ".join(f"{s.name} {s.out_units}" for s, _, _ in new_specs)
    )
    return out


def count_model_nonzero(model: ConvNet, scope: Scope = "all") -> int:
    return sum(
        int(torch.count_nonzero(model.weight(spec.name)).item())
        for spec in model.specs
        if scope == "all" or spec.kind == "conv"
    )


def pruning_rate(model: ConvNet, scope: Scope = "all") -> Union[Fraction, float]:
    """Dense weight count of the architecture over surviving nonzero weights."""
    return compression_ratio(model.dense_weight_count(scope), count_model_nonzero(model, scope))
