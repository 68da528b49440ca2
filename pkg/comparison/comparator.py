"""
Matched-accuracy comparison of non-structured and structured pruning.

Both pipelines start from the same trained model and hold every step within
``accuracy_band`` of the baseline accuracy:

    non-structured   prune (two progressive rounds)  ->  quantize
    structured       column prune  ->  filter prune (+ channel removal)  ->  quantize

A pruning step that breaks the band retries with half the rate increment, up
to ``max_retries`` times; a quantization step that breaks it retries with one
more bit. Storage and PPR verdicts are then read off the two results; their
final accuracies must also lie within ``accuracy_band`` of each other.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import pandas as pd
from loguru import logger

from comparison.ppr import (
    ComputeVerdict,
    PprModel,
    StorageVerdict,
    Winner,
    decide_compute,
    decide_storage,
)
from compression.admm import RhoSchedule
from compression.plan import CompressionPlan, single_round_plan, two_round_plan
from compression.progressive import progressive_prune
from compression.projections import Variant
from compression.quantization import quantize_model
from models.errors import AccuracyCollapseError, ConfigError
from models.network import ConvNet, Scope
from storage.report import Regime, StorageReport, reports_frame, storage_report
from training.mnist_idx import Dataset
from training.trainer import TrainConfig, evaluate

EXIT_STRUCTURED = 0
EXIT_NONSTRUCTURED = 10

STORAGE_CAVEAT = (
    "non-structured pruning needs less storage here, but sparse kernels and index decoding "
    "are not reflected in the storage numbers"
)


@dataclass(frozen=True)
class ComparisonSettings:
    accuracy_band: float = 0.001
    quant_bits: int = 3
    nonstructured_rate: float = 20.0
    column_rate: float = 4.0
    filter_rate: float = 2.0
    max_retries: int = 4
    scope: Scope = "conv"
    admm_epochs: int = 12
    retrain_epochs: int = 4
    epsilon: float = 0.2
    absorb_quantized_zeros: bool = True
    ppr: PprModel = PprModel()


@dataclass
class StepRecord:
    stage: str
    target: float
    accepted: bool
    accuracy: float


@dataclass
class RegimeResult:
    regime: Regime
    prune_rate: float
    quant_bits: int
    accuracy: float
    storage: StorageReport
    steps: List[StepRecord] = field(default_factory=list)


# (model, bits, dataset, schedule, config, settings, regime) -> quantized model
Quantizer = Callable[[ConvNet, int, Dataset, RhoSchedule, TrainConfig, ComparisonSettings, Regime], ConvNet]


def admm_quantizer(model: ConvNet, bits: int, dataset: Dataset, schedule: RhoSchedule,
                   config: TrainConfig, settings: ComparisonSettings, regime: Regime) -> ConvNet:
    absorb = settings.absorb_quantized_zeros and regime == "nonstructured"
    return quantize_model(model, bits, dataset, schedule, config, settings.admm_epochs,
                          settings.retrain_epochs, settings.epsilon, layers=scoped_layers(model, settings.scope),
                          include_zero=absorb, absorb_zeros=absorb)


def scoped_layers(model: ConvNet, scope: Scope) -> List[str]:
    return [spec.name for spec in model.specs if scope == "all" or spec.kind == "conv"]


@dataclass
class ComparisonReport:
    baseline_accuracy: float
    nonstructured: RegimeResult
    structured: RegimeResult
    compute: ComputeVerdict
    storage: StorageVerdict
    overall: Winner
    annotations: List[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_NONSTRUCTURED if self.overall == "nonstructured" else EXIT_STRUCTURED

    def to_dict(self) -> dict:
        def regime(result: RegimeResult) -> dict:
            out = asdict(result)
            out["storage"] = asdict(result.storage)
            return out

        return {
            "baseline_accuracy": self.baseline_accuracy,
            "nonstructured": regime(self.nonstructured),
            "structured": regime(self.structured),
            "compute": asdict(self.compute),
            "storage": {**asdict(self.storage), "margin": self.storage.margin},
            "overall": self.overall,
            "annotations": self.annotations,
        }

    @classmethod
    def from_dict(cls, data: dict, ppr: Optional[PprModel] = None) -> "ComparisonReport":
        """Rebuild a saved report; verdicts are recomputed from its numbers."""
        def regime(d: dict) -> RegimeResult:
            return RegimeResult(
                regime=d["regime"], prune_rate=d["prune_rate"], quant_bits=d["quant_bits"],
                accuracy=d["accuracy"], storage=StorageReport(**d["storage"]),
                steps=[StepRecord(**s) for s in d.get("steps", [])],
            )

        return judge(data["baseline_accuracy"], regime(data["nonstructured"]), regime(data["structured"]),
                     ppr or PprModel(), band=math.inf)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def frame(self) -> pd.DataFrame:
        frame = reports_frame([("nonstructured", self.nonstructured.storage),
                               ("structured", self.structured.storage)])
        frame.insert(1, "accuracy", [self.nonstructured.accuracy, self.structured.accuracy])
        return frame

    def render(self) -> str:
        lines = [
            self.frame().to_string(index=False),
            "",
            f"rate ratio (structured / non-structured): {self.compute.rate_ratio:.1%} "
            f"(structured preferred at >= {self.compute.threshold:.1%})",
            f"effective speedup: structured {self.compute.structured_speedup:.2f}x, "
            f"non-structured {self.compute.nonstructured_speedup:.2f}x",
            f"compute: {self.compute.winner}   storage: {self.storage.winner} "
            f"(margin {self.storage.margin:.1%})   overall: {self.overall}",
        ]
        lines += [f"note: {note}" for note in self.annotations]
        return "\n".join(lines)


def overall_verdict(compute: ComputeVerdict, storage: StorageVerdict) -> Tuple[Winner, List[str]]:
    notes = []
    if compute.no_benefit:
        notes.append("neither regime reaches an effective speedup above 1x")
    if storage.winner in ("tie", compute.winner):
        return compute.winner, notes
    if storage.winner == "nonstructured":
        notes.append(STORAGE_CAVEAT)
    else:
        notes.append("structured pruning needs less storage but loses on computation")
    return compute.winner, notes


def judge(baseline_accuracy: float, ns: RegimeResult, s: RegimeResult, ppr: PprModel,
          band: float) -> ComparisonReport:
    compute = decide_compute(max(ns.prune_rate, 1.0), max(s.prune_rate, 1.0), ppr)
    storage = decide_storage(ns.storage, s.storage, ns.accuracy, s.accuracy, band)
    overall, notes = overall_verdict(compute, storage)
    return ComparisonReport(baseline_accuracy, ns, s, compute, storage, overall, notes)


def _pruning_plan(model: ConvNet, rate: float, variant: Variant, settings: ComparisonSettings,
                  progressive: bool) -> CompressionPlan:
    layers = scoped_layers(model, settings.scope)
    if variant == "filter":
        # class outputs are never removed
        layers = [name for name in layers if name != model.layer_names[-1]]
    shapes = {name: model.spec(name).weight_shape for name in layers}
    build = two_round_plan if progressive else single_round_plan
    return build({n: rate for n in layers}, shapes, variant,
                 settings.admm_epochs, settings.retrain_epochs, settings.epsilon)


def _search(
    stage: str,
    model: ConvNet,
    target: float,
    prune: Callable[[ConvNet, float], ConvNet],
    floor_accuracy: float,
    dataset: Dataset,
    settings: ComparisonSettings,
    steps: List[StepRecord],
) -> ConvNet:
    """Largest rate up to ``target`` (halving the increment on failure) that holds the band."""
    start = 1.0
    increment = target - start
    rate = target
    for _ in range(settings.max_retries + 1):
        try:
            candidate = prune(model, rate)
            accuracy = evaluate(candidate, dataset.test)
        except AccuracyCollapseError as exc:
            logger.warning(f"{stage} at {rate:.2f}x collapsed: {exc}")
            candidate, accuracy = None, -math.inf
        accepted = accuracy >= floor_accuracy
        steps.append(StepRecord(stage, rate, accepted, accuracy))
        logger.info(f"{stage}: {rate:.2f}x -> accuracy {accuracy:.4f} ({'kept' if accepted else 'backing off'})")
        if accepted:
            return candidate
        increment /= 2
        rate = start + increment
    logger.warning(f"{stage}: no rate within the accuracy band, step skipped")
    return model


def _quantize(model: ConvNet, regime: Regime, quantizer: Quantizer, floor_accuracy: float,
              dataset: Dataset, schedule: RhoSchedule, config: TrainConfig,
              settings: ComparisonSettings, steps: List[StepRecord]) -> Tuple[ConvNet, int]:
    bits = settings.quant_bits
    for _ in range(settings.max_retries + 1):
        candidate = quantizer(model, bits, dataset, schedule, config, settings, regime)
        accuracy = evaluate(candidate, dataset.test)
        accepted = accuracy >= floor_accuracy
        steps.append(StepRecord("quantize", bits, accepted, accuracy))
        if accepted:
            return candidate, bits
        bits += 1
    logger.warning(f"{regime}: quantization never held the band; keeping {bits - 1}-bit result")
    return candidate, bits - 1


def run_comparison(
    model: ConvNet,
    dataset: Dataset,
    settings: ComparisonSettings,
    schedule: RhoSchedule,
    config: TrainConfig,
    quantizer: Quantizer = admm_quantizer,
) -> ComparisonReport:
    baseline = evaluate(model, dataset.test)
    floor_accuracy = baseline - settings.accuracy_band
    logger.info(f"baseline accuracy {baseline:.4f}; band {settings.accuracy_band:g}")

    def prune_with(variant: Variant, progressive: bool, propagate: bool):
        def prune(current: ConvNet, rate: float) -> ConvNet:
            plan = _pruning_plan(current, rate, variant, settings, progressive)
            pruned, _ = progressive_prune(current, plan, dataset, schedule, config,
                                          propagate_filters=propagate)
            return pruned
        return prune

    results: Dict[str, RegimeResult] = {}

    ns_steps: List[StepRecord] = []
    ns_model = _search("nonstructured", model, settings.nonstructured_rate,
                       prune_with("nonstructured", True, False), floor_accuracy, dataset, settings, ns_steps)
    ns_model, ns_bits = _quantize(ns_model, "nonstructured", quantizer, floor_accuracy, dataset,
                                  schedule, config, settings, ns_steps)
    results["nonstructured"] = _result("nonstructured", ns_model, ns_bits, dataset, settings, ns_steps)

    s_steps: List[StepRecord] = []
    s_model = _search("column", model, settings.column_rate,
                      prune_with("column", False, False), floor_accuracy, dataset, settings, s_steps)
    s_model = _search("filter", s_model, settings.filter_rate,
                      prune_with("filter", False, True), floor_accuracy, dataset, settings, s_steps)
    s_model, s_bits = _quantize(s_model, "structured", quantizer, floor_accuracy, dataset,
                                schedule, config, settings, s_steps)
    results["structured"] = _result("structured", s_model, s_bits, dataset, settings, s_steps)

    if not any(step.accepted for step in ns_steps + s_steps if step.stage != "quantize"):
        raise ConfigError("no pruning step holds the accuracy band", field="comparison.accuracy_band")

    return judge(baseline, results["nonstructured"], results["structured"], settings.ppr,
                 band=settings.accuracy_band)


def _result(regime: Regime, model: ConvNet, bits: int, dataset: Dataset,
            settings: ComparisonSettings, steps: List[StepRecord]) -> RegimeResult:
    report = storage_report(model, bits, "relative", settings.scope, regime)
    return RegimeResult(regime, float(report.pruning_rate), bits, evaluate(model, dataset.test), report, steps)
