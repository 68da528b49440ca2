"""
Independent feasibility check of a compressed model.

Counts are recomputed straight from the stored arrays, without going through
the projection code, so a bug there cannot hide itself.
"""

from dataclasses import dataclass, field
from typing import List, Mapping, Optional

import numpy as np

from compression.projections import ConstraintSpec
from models.network import ConvNet


@dataclass
class VerificationReport:
    checked_layers: List[str] = field(default_factory=list)
    problems: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def _nonzero_groups(w: np.ndarray, variant: str) -> int:
    w4 = w.reshape(w.shape + (1,) * (4 - w.ndim))
    if variant == "filter":
        alive = [np.any(w4[a] != 0) for a in range(w4.shape[0])]
    elif variant == "channel":
        alive = [np.any(w4[:, b] != 0) for b in range(w4.shape[1])]
    else:
        a, b, c, d = w4.shape
        alive = [np.any(w4[:, i, j, k] != 0) for i in range(b) for j in range(c) for k in range(d)]
    return int(sum(alive))


def verify_model(model: ConvNet, specs: Optional[Mapping[str, ConstraintSpec]] = None) -> VerificationReport:
    """
    Masked zeros are exact zeros, budgets hold, nonzero quantized weights sit on their levels.

    Levels are compared as the layer's weight dtype stores them.
    """
    report = VerificationReport()
    weights = model.weight_arrays()
    for name, w in weights.items():
        report.checked_layers.append(name)
        mask = model.mask_array(name)
        if mask is not None:
            leaked = int(np.count_nonzero(w[~mask]))
            if leaked:
                report.problems.append(f"{name}: {leaked} masked weights are not exactly zero")
        spec = (specs or {}).get(name)
        if spec is not None and spec.is_pruning:
            count = int(np.count_nonzero(w)) if spec.variant == "nonstructured" else _nonzero_groups(w, spec.variant)
            if count > spec.budget:
                report.problems.append(f"{name}: {count} nonzero {spec.variant} groups exceed budget {spec.budget}")
        levels = model.levels.get(name)
        if levels is None and spec is not None and spec.variant == "quantization":
            levels = np.asarray(spec.levels)
        if levels is not None:
            values = w[w != 0]
            off = int(np.count_nonzero(~np.isin(values, model.representable(name, levels))))
            if off:
                report.problems.append(f"{name}: {off} weights are off the quantization levels")
    return report
