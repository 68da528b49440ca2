"""
Command implementations behind ``compress.py``.

Every command that produces artifacts writes them into its own run directory
(``<output_dir>/<command>_<timestamp>/``): ``config.json``, ``run.log``,
checkpoints, ``manifest.json`` and the reports. The directory is created only
after the configuration has been validated.
"""

import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from loguru import logger

from cli.config import ExperimentConfig
from cli.reporting import RunDir, create_run_dir, emit, open_run_dir, render_frame, write_frame, write_json
from comparison.comparator import ComparisonReport, run_comparison
from comparison.tables import DEFAULT_TABLES, check_tables, checks_frame, load_tables, pairs_frame, rate_pairs
from compression.admm import AdmmState, load_state, save_state
from compression.plan import CompressionPlan, derive_plan, single_round_plan, two_round_plan
from compression.progressive import progressive_prune
from compression.quantization import quantize_model
from compression.verify import verify_model
from models.checkpoint import load_checkpoint, save_checkpoint
from models.errors import CheckpointError, ConfigError, InfeasibleBudgetError
from models.network import ConvNet, build_model, pruning_rate
from storage.report import IndexScheme, Regime, StorageReport, reports_frame, storage_report
from training.mnist_idx import Dataset, load_mnist, synthetic_dataset
from training.trainer import Trainer, evaluate

CompressRegime = Literal["ns", "struct", "quant"]

MODEL_FILE = "model.npz"
STATE_FILE = "admm_state.npz"
RESUME_FILE = "resume.json"


@dataclass
class CommandResult:
    run_dir: Optional[Path] = None
    exit_code: int = 0
    payload: Any = None


def load_dataset(config: ExperimentConfig) -> Dataset:
    if config.dataset == "synthetic":
        return synthetic_dataset(seed=config.seed)
    return load_mnist(config.dataset_path, limit=config.limit)


def _start(config: ExperimentConfig, command: str) -> RunDir:
    torch.manual_seed(config.seed)
    np.random.seed(config.seed)
    return create_run_dir(config.output_dir, command, config.model_dump())


def _source_model(config: ExperimentConfig, checkpoint: Optional[Union[str, Path]]) -> ConvNet:
    if checkpoint is None:
        return build_model(config.arch, config.seed, config.torch_dtype)
    return load_checkpoint(checkpoint, config.torch_dtype)


def cmd_train(config: ExperimentConfig) -> CommandResult:
    """Train the baseline network; writes ``model.npz`` and ``train_log.csv``."""
    dataset = load_dataset(config)
    run = _start(config, "train")
    try:
        model = build_model(config.arch, config.seed, config.torch_dtype)
        trainer = Trainer(config.train_config, progress=sys.stderr.isatty())
        trained = trainer.fit(model, dataset, log_path=run.file("train_log.csv"))
        accuracy = evaluate(trained, dataset.test)
        path = save_checkpoint(trained, run.file(MODEL_FILE))
        write_json({
            "command": "train",
            "arch": config.arch,
            "seed": config.seed,
            "epochs": config.train.epochs,
            "accuracy": accuracy,
            "checkpoint": path.name,
        }, run.file("manifest.json"))
        logger.info(f"baseline accuracy {accuracy:.4f}, checkpoint {path}")
        return CommandResult(run.path, 0, path)
    finally:
        run.close()


# ---------------------------------------------------------------- compress


@dataclass
class Stage:
    name: str
    plan: Optional[CompressionPlan] = None
    propagate_filters: bool = False


@dataclass
class ResumePoint:
    regime: str
    stage: int = 0
    round: int = 1
    baseline_accuracy: Optional[float] = None
    finished: List[dict] = field(default_factory=list)

    def save(self, run: RunDir) -> None:
        write_json(vars(self), run.file(RESUME_FILE))

    @classmethod
    def load(cls, run_dir: Path) -> "ResumePoint":
        path = run_dir / RESUME_FILE
        if not path.exists():
            raise CheckpointError(f"{run_dir} has no {RESUME_FILE}; nothing to resume")
        return cls(**json.loads(path.read_text()))


def _scoped(model: ConvNet, scope: str, explicit: Optional[List[str]] = None) -> List[str]:
    if explicit is not None:
        unknown = sorted(set(explicit) - set(model.layer_names))
        if unknown:
            raise ConfigError(f"unknown layers {unknown}", field="plan.layers")
        return list(explicit)
    return [spec.name for spec in model.specs if scope == "all" or spec.kind == "conv"]


def _shapes(model: ConvNet, layers: List[str]) -> Dict[str, Tuple[int, ...]]:
    return {name: model.spec(name).weight_shape for name in layers}


def build_stages(model: ConvNet, config: ExperimentConfig, regime: CompressRegime) -> List[Stage]:
    plan = config.plan
    layers = _scoped(model, plan.scope, plan.layers)
    epochs = dict(admm_epochs=plan.admm_epochs, retrain_epochs=plan.retrain_epochs, epsilon=config.quant.epsilon)
    if regime == "quant":
        return [Stage("quantize")]
    if regime == "ns":
        if not layers:
            return [Stage("nonstructured", None)]
        if plan.prior_rates:
            missing = sorted(set(plan.prior_rates) - set(model.layer_names))
            if missing:
                raise ConfigError(f"unknown layers {missing}", field="plan.prior_rates")
            built = derive_plan(plan.prior_rates, _shapes(model, list(plan.prior_rates)), "nonstructured",
                                plan.margin, **epochs)
        else:
            build = two_round_plan if plan.progressive else single_round_plan
            built = build({n: plan.rate for n in layers}, _shapes(model, layers), "nonstructured", **epochs)
        return [Stage("nonstructured", built)]
    filter_layers = [n for n in layers if n != model.layer_names[-1]]
    return [
        Stage("column", single_round_plan({n: plan.column_rate for n in layers}, _shapes(model, layers),
                                          "column", **epochs)),
        Stage("filter", single_round_plan({n: plan.filter_rate for n in filter_layers},
                                          _shapes(model, filter_layers), "filter", **epochs),
              propagate_filters=True),
    ]


def _run_stage(stage: Stage, index: int, model: ConvNet, dataset: Dataset, config: ExperimentConfig,
               point: ResumePoint, run: RunDir, state: Optional[AdmmState]) -> ConvNet:
    schedule = config.rho_schedule
    train_config = config.train_config

    def checkpoint_iteration(round_index: int, current: ConvNet, current_state: AdmmState) -> None:
        save_checkpoint(current, run.file(MODEL_FILE))
        save_state(current_state, run.file(STATE_FILE))
        point.stage, point.round = index, round_index
        point.save(run)

    if stage.name == "quantize":
        quant = config.quant
        include_zero = quant.absorb_zeros if quant.include_zero is None else quant.include_zero
        quantized = quantize_model(
            model, quant.bits, dataset, schedule, train_config, quant.admm_epochs, quant.retrain_epochs,
            quant.epsilon, layers=_scoped(model, quant.scope), include_zero=include_zero,
            absorb_zeros=include_zero and quant.absorb_zeros, baseline_accuracy=point.baseline_accuracy,
            state=state, on_iteration=lambda m, s: checkpoint_iteration(1, m, s),
        )
        point.finished.append({"stage": "quantize", "bits": quant.bits, "include_zero": include_zero})
        return quantized
    if stage.plan is None:
        # no constrained layer: ADMM degenerates to plain training
        return Trainer(train_config).fit(model, dataset)
    start_round = point.round if point.stage == index else 1
    pruned, states = progressive_prune(
        model, stage.plan, dataset, schedule, train_config, point.baseline_accuracy,
        propagate_filters=stage.propagate_filters, on_iteration=checkpoint_iteration,
        start_round=start_round, resume_state=state,
    )
    point.finished.append({"stage": stage.name, "plan": stage.plan.to_dict(),
                           "admm": [s.to_manifest() for s in states]})
    return pruned


def _verify(model: ConvNet, stages: List[Stage]) -> List[str]:
    problems = []
    for stage in stages:
        specs = stage.plan.rounds[-1] if stage.plan is not None else None
        problems += verify_model(model, specs).problems
    return problems


def cmd_compress(config: ExperimentConfig, regime: CompressRegime,
                 checkpoint: Optional[Union[str, Path]] = None,
                 resume: Optional[Union[str, Path]] = None) -> CommandResult:
    """
    Run one compression regime on a trained checkpoint.

    ``ns`` runs progressive non-structured pruning, ``struct`` column then
    filter pruning with channel removal, ``quant`` ADMM quantization. Without
    a checkpoint the run starts from a freshly initialized network.
    """
    dataset = load_dataset(config)
    if resume is not None:
        run_dir = Path(resume)
        point = ResumePoint.load(run_dir)
        if point.regime != regime:
            raise ConfigError(f"{run_dir} was a {point.regime} run, not {regime}", field="regime")
        run = open_run_dir(run_dir)
        model = load_checkpoint(run.file(MODEL_FILE), config.torch_dtype)
        stages = build_stages(model, config, regime)
        state = load_state(run.file(STATE_FILE)) if run.file(STATE_FILE).exists() else None
        logger.info(f"resuming {regime} at stage {point.stage}, round {point.round}"
                    + (f", ADMM iteration {state.iteration}" if state else ""))
    else:
        model = _source_model(config, checkpoint)
        stages = build_stages(model, config, regime)
        run = _start(config, "compress")
        point = ResumePoint(regime, baseline_accuracy=evaluate(model, dataset.test))
        state = None
        save_checkpoint(model, run.file("source.npz"))
        point.save(run)

    try:
        for index, stage in enumerate(stages):
            if index < point.stage:
                continue
            logger.info(f"stage {stage.name}")
            model = _run_stage(stage, index, model, dataset, config, point, run,
                               state if index == point.stage else None)
            state = None
            run.file(STATE_FILE).unlink(missing_ok=True)
            point.stage, point.round = index + 1, 1
            save_checkpoint(model, run.file(MODEL_FILE))
            point.save(run)

        problems = _verify(model, stages)
        if problems:
            for problem in problems:
                logger.error(problem)
            raise InfeasibleBudgetError(f"compressed model failed verification ({len(problems)} problems)")

        quant_bits = config.quant.bits if regime == "quant" else 32
        storage_regime: Regime = "structured" if regime == "struct" else "nonstructured"
        report = storage_report(model, quant_bits, "relative", config.comparison.scope, storage_regime)
        accuracy = evaluate(model, dataset.test)
        path = save_checkpoint(model, run.file(MODEL_FILE))
        write_frame(reports_frame([(regime, report)]), run.file("storage.csv"))
        write_json({
            "command": "compress",
            "regime": regime,
            "source": str(checkpoint) if checkpoint is not None else None,
            "baseline_accuracy": point.baseline_accuracy,
            "accuracy": accuracy,
            "pruning_rate": float(pruning_rate(model)),
            "conv_pruning_rate": float(pruning_rate(model, "conv")),
            "stages": point.finished,
            "verified": True,
            "storage": report.to_row(),
        }, run.file("manifest.json"))
        run.file(RESUME_FILE).unlink(missing_ok=True)
        logger.info(f"{regime}: accuracy {accuracy:.4f}, rate {float(pruning_rate(model)):.2f}x, checkpoint {path}")
        return CommandResult(run.path, 0, path)
    finally:
        run.close()


# ---------------------------------------------------------------- analyze


def stored_bits(model: ConvNet) -> int:
    """Bits per weight implied by the model's level sets; 32 for a float model."""
    if not model.levels:
        return 32
    return max(max(1, math.ceil(math.log2(len(levels)))) for levels in model.levels.values())


def cmd_analyze(checkpoint: Union[str, Path], quant_bits: Optional[int] = None,
                scheme: IndexScheme = "relative", scope: str = "conv",
                regime: Regime = "nonstructured", output: Optional[Union[str, Path]] = None) -> StorageReport:
    """Storage report of a checkpoint (prints a table; ``output`` keeps a CSV copy)."""
    model = load_checkpoint(checkpoint)
    bits = stored_bits(model) if quant_bits is None else quant_bits
    report = storage_report(model, bits, scheme, scope, regime)
    frame = reports_frame([(Path(checkpoint).stem, report)])
    emit(render_frame(frame))
    if output is not None:
        write_frame(frame, output)
    return report


# ---------------------------------------------------------------- compare


def cmd_compare(config: ExperimentConfig, checkpoint: Optional[Union[str, Path]] = None) -> CommandResult:
    """Matched-accuracy comparison; the exit code carries the overall verdict."""
    dataset = load_dataset(config)
    run = _start(config, "compare")
    try:
        if checkpoint is None:
            logger.info("no baseline checkpoint given: training one")
            trainer = Trainer(config.train_config, progress=sys.stderr.isatty())
            model = trainer.fit(build_model(config.arch, config.seed, config.torch_dtype), dataset,
                                log_path=run.file("train_log.csv"))
            save_checkpoint(model, run.file("baseline.npz"))
        else:
            model = load_checkpoint(checkpoint, config.torch_dtype)
        report = run_comparison(model, dataset, config.comparison_settings,
                                config.rho_schedule, config.train_config)
        report.save(run.file("comparison.json"))
        write_frame(report.frame(), run.file("comparison.csv"))
        emit(report.render(), run.file("comparison.txt"))
        write_json({"command": "compare", "overall": report.overall, "exit_code": report.exit_code},
                   run.file("manifest.json"))
        return CommandResult(run.path, report.exit_code, report)
    finally:
        run.close()


def recheck_report(path: Union[str, Path]) -> ComparisonReport:
    """Recompute the verdicts of a saved comparison from its numbers."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"comparison report not found: {path}")
    return ComparisonReport.from_dict(json.loads(path.read_text()))


# ---------------------------------------------------------------- tables


def cmd_tables(input_path: Union[str, Path] = DEFAULT_TABLES,
               output_dir: Optional[Union[str, Path]] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Recompute the published storage and rate-ratio columns from their raw counts."""
    tables = load_tables(input_path)
    checks = checks_frame(check_tables(tables))
    pairs = pairs_frame(rate_pairs(tables))
    emit(render_frame(checks))
    emit("")
    emit(render_frame(pairs))
    if output_dir is not None:
        run = create_run_dir(output_dir, "tables")
        try:
            write_frame(checks, run.file("storage_columns.csv"))
            write_frame(pairs, run.file("rate_pairs.csv"))
        finally:
            run.close()
    flagged = checks[checks["notes"] != ""]
    for _, row in flagged.iterrows():
        logger.warning(f"{row['table']} / {row['regime']} {row['method']}: {row['notes']}")
    return checks, pairs
