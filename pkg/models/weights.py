"""
Weight tensors and their structured views.

A CONV layer weight is a 4-D tensor (A filters, B channels, C height, D width).
FC layers are handled as CONV layers with C = D = 1, so every structured view
(filter / channel / column) and every projection applies to them unchanged.

GEMM view (row-major, same order as im2col lowering):
    row a    = filter a flattened over (b, c, d)
    column j = position (b, c, d) across all filters
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Literal, NamedTuple, Tuple, Union

import numpy as np

from models.errors import NonFiniteError, ShapeError

LayerKind = Literal["conv", "fc"]
GroupAxis = Literal["filter", "channel", "column"]

GROUP_AXES: Tuple[GroupAxis, ...] = ("filter", "channel", "column")


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class WeightTensor:
    """Immutable layer weight: (A, B, C, D) for conv, (rows, cols) for fc."""

    values: np.ndarray
    layer_kind: LayerKind = "conv"
    name: str = ""
    dims: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        values = _frozen(self.values)
        expected = 4 if self.layer_kind == "conv" else 2
        if values.ndim != expected:
            raise ShapeError(
                f"{self.layer_kind} weight must be {expected}-D, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("weight tensor holds NaN/Inf", layer=self.name or None)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dims", tuple(int(d) for d in values.shape))

    @classmethod
    def from_flat(cls, dims: Tuple[int, ...], flat, layer_kind: LayerKind = "conv",
                  name: str = "") -> "WeightTensor":
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != int(np.prod(dims)):
            raise ShapeError(f"{flat.size} values cannot fill dims {tuple(dims)}")
        return cls(flat.reshape(dims), layer_kind, name)

    @property
    def numel(self) -> int:
        return int(self.values.size)

    def as_4d(self) -> np.ndarray:
        return as_4d(self.values)

    def replace(self, values: np.ndarray) -> "WeightTensor":
        return WeightTensor(np.asarray(values).reshape(self.dims), self.layer_kind, self.name)


@dataclass(frozen=True)
class BiasVector:
    """One bias per output filter / neuron."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values).ravel()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def check_against(self, weight: WeightTensor) -> None:
        if self.values.size != weight.dims[0]:
            raise ShapeError(
                f"bias length {self.values.size} != {weight.dims[0]} outputs of {weight.name or 'layer'}"
            )


@dataclass(frozen=True)
class GemmMatrix:
    """Weight matrix form of a conv layer: A rows by B*C*D columns."""

    values: np.ndarray
    source_dims: Tuple[int, int, int, int]

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])


class GroupSlice(NamedTuple):
    """Flat (row-major) indices of one structured group and the values found there."""

    indices: np.ndarray
    values: np.ndarray


def as_4d(array: np.ndarray) -> np.ndarray:
    """View a 2-D fc weight as (rows, cols, 1, 1); 4-D arrays pass through."""
    array = np.asarray(array)
    if array.ndim == 4:
        return array
    if array.ndim == 2:
        return array.reshape(array.shape[0], array.shape[1], 1, 1)
    raise ShapeError(f"expected a 2-D or 4-D weight, got shape {array.shape}")


def group_matrix(array: np.ndarray, axis: GroupAxis) -> np.ndarray:
    """Rearrange weights so that each row is one group of ``axis``."""
    x = as_4d(array)
    a, b = x.shape[0], x.shape[1]
    if axis == "filter":
        return x.reshape(a, -1)
    if axis == "channel":
        return x.transpose(1, 0, 2, 3).reshape(b, -1)
    if axis == "column":
        return x.reshape(a, -1).T
    raise ValueError(f"unknown group axis: {axis!r}")


def from_group_matrix(groups: np.ndarray, axis: GroupAxis, shape: Tuple[int, ...]) -> np.ndarray:
    """Inverse of :func:`group_matrix`; returns an array of ``shape``."""
    dims4 = as_4d(np.empty(shape, dtype=np.bool_)).shape
    a, b, c, d = dims4
    if axis == "filter":
        out = groups.reshape(a, b, c, d)
    elif axis == "channel":
        out = groups.reshape(b, a, c, d).transpose(1, 0, 2, 3)
    elif axis == "column":
        out = groups.T.reshape(a, b, c, d)
    else:
        raise ValueError(f"unknown group axis: {axis!r}")
    return np.ascontiguousarray(out).reshape(shape)


def group_count(shape: Tuple[int, ...], axis: GroupAxis) -> int:
    a, b, c, d = as_4d(np.empty(shape, dtype=np.bool_)).shape
    return {"filter": a, "channel": b, "column": b * c * d}[axis]


def to_gemm(w: WeightTensor) -> GemmMatrix:
    if w.layer_kind != "conv":
        raise ShapeError(f"to_gemm needs a conv layer, got {w.layer_kind} ({w.name or 'unnamed'})")
    a = w.dims[0]
    matrix = np.ascontiguousarray(w.values.reshape(a, -1))
    return GemmMatrix(matrix, tuple(w.dims))


def from_gemm(m: GemmMatrix, name: str = "") -> WeightTensor:
    return WeightTensor(m.values.reshape(m.source_dims), "conv", name)


def weight_matrix(w: Union[WeightTensor, np.ndarray]) -> np.ndarray:
    """2-D matrix used for storage accounting: GEMM form for conv, the matrix itself for fc."""
    values = w.values if isinstance(w, WeightTensor) else np.asarray(w)
    return values.reshape(values.shape[0], -1)


def structured_view(w: WeightTensor, axis: GroupAxis) -> List[GroupSlice]:
    if w.layer_kind != "conv":
        raise ShapeError(f"structured_view needs a conv layer, got {w.layer_kind}")
    index = np.arange(w.numel).reshape(w.dims)
    index_groups = group_matrix(index, axis)
    value_groups = group_matrix(w.values, axis)
    return [GroupSlice(np.array(idx), np.array(vals)) for idx, vals in zip(index_groups, value_groups)]


def count_nonzero(w: Union[WeightTensor, np.ndarray]) -> int:
    values = w.values if isinstance(w, WeightTensor) else np.asarray(w)
    return int(np.count_nonzero(values))


def count_nonzero_groups(w: Union[WeightTensor, np.ndarray], axis: GroupAxis) -> int:
    values = w.values if isinstance(w, WeightTensor) else np.asarray(w)
    groups = group_matrix(values, axis)
    return int(np.count_nonzero(np.any(groups != 0, axis=1)))


def compression_ratio(original: int, nonzero: int) -> Union[Fraction, float]:
    """original / nonzero as an exact Fraction; ``math.inf`` when nothing survives."""
    if nonzero == 0:
        return float("inf")
    return Fraction(original, nonzero)
