"""
Tests for the PPR rules, the published-table recheck and the matched-accuracy comparator.
"""

import copy
import math
from fractions import Fraction

import numpy as np
import pytest

from comparison.comparator import (
    EXIT_NONSTRUCTURED,
    EXIT_STRUCTURED,
    STORAGE_CAVEAT,
    ComparisonReport,
    ComparisonSettings,
    StepRecord,
    _search,
    overall_verdict,
    run_comparison,
)
from comparison.ppr import (
    PprModel,
    check_accuracy_band,
    decide_compute,
    decide_storage,
    effective_speedup,
)
from comparison.tables import (
    check_tables,
    checks_frame,
    load_tables,
    pairs_frame,
    printed_interval,
    rate_pairs,
)
from compression.admm import RhoSchedule
from models.errors import AccuracyCollapseError, AccuracyMismatchError, ConfigError
from storage.report import KB, report_from_counts
from training.trainer import TrainConfig, Trainer
from tests.conftest import tiny_net


class TestEffectiveSpeedup:
    def test_values(self):
        assert effective_speedup("5.1", 1) == pytest.approx(5.1)
        assert effective_speedup("11.2", "2.7") == pytest.approx(4.148, abs=1e-3)

    def test_rejects_rates_below_one(self):
        with pytest.raises(ValueError):
            effective_speedup(0.5, 1)
        with pytest.raises(ValueError):
            PprModel(nonstructured_ppr=0.9)


class TestDecideCompute:
    def test_alexnet_pair(self):
        verdict = decide_compute("11.2", "5.1")
        assert verdict.winner == "structured"
        assert verdict.rate_ratio == pytest.approx(0.455, abs=1e-3)
        assert verdict.threshold == pytest.approx(1 / 2.7)

    def test_exact_boundary_goes_to_structured(self):
        assert decide_compute("2.7", "1.0").winner == "structured"
        assert decide_compute(2.7, 1.0).winner == "structured"
        assert decide_compute("2.71", "1.0").winner == "nonstructured"

    def test_threshold_rule(self):
        rng = np.random.default_rng(0)
        for _ in range(2_000):
            ns = Fraction(int(rng.integers(10, 2000)), 10)
            s = Fraction(int(rng.integers(10, 2000)), 10)
            winner = decide_compute(ns, s).winner
            assert (winner == "structured") == (s / ns >= Fraction(10, 27))

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            ns = Fraction(int(rng.integers(10, 500)), 10)
            s = Fraction(int(rng.integers(10, 500)), 10)
            c = Fraction(int(rng.integers(10, 100)), 10)
            assert decide_compute(ns, s).winner == decide_compute(ns * c, s * c).winner

    def test_custom_ppr(self):
        assert decide_compute(3, 1, PprModel(nonstructured_ppr=4.0)).winner == "structured"
        assert decide_compute(3, 1, PprModel(nonstructured_ppr=2.0)).winner == "nonstructured"

    def test_no_benefit(self):
        assert decide_compute(2, 1).no_benefit
        assert not decide_compute(11.2, 5.1).no_benefit


class TestDecideStorage:
    def test_lenet_pair(self):
        ns = report_from_counts(223, 25_500, 3, index_bits=8)
        s = report_from_counts(290, 25_500, 3, regime="structured")
        verdict = decide_storage(ns, s, 0.990, 0.990)
        assert verdict.winner == "structured"
        assert verdict.structured_bytes == pytest.approx(0.10875 * KB)

    def test_tie(self):
        report = report_from_counts(100, 1000, 4, regime="structured")
        assert decide_storage(report, report).winner == "tie"
        assert decide_storage(report, report).margin == 0.0

    def test_accuracy_band(self):
        report = report_from_counts(100, 1000, 4, regime="structured")
        with pytest.raises(AccuracyMismatchError):
            decide_storage(report, report, 0.990, 0.985)
        check_accuracy_band(0.990, 0.989)
        check_accuracy_band(math.nan, 0.5)


@pytest.fixture(scope="module")
def tables():
    return load_tables()


class TestPublishedTables:
    """The published comparison tables, recomputed from their raw counts."""

    def test_printed_interval(self):
        low, high = printed_interval("0.26MB")
        assert low == pytest.approx(255_000)
        assert high == pytest.approx(265_000)
        assert printed_interval("223") == pytest.approx((222.5, 223.5))

    def test_every_weight_store_is_consistent(self, tables):
        for check in check_tables(tables):
            assert check.store_consistent, (check.table, check.method)

    def test_named_rows_within_two_percent(self, tables):
        checks = {(c.table, c.regime, c.method): c for c in check_tables(tables)}
        for key in [
            ("alexnet-imagenet", "nonstructured", "ADMM"),
            ("alexnet-imagenet", "structured", "ADMM"),
            ("resnet18-imagenet", "nonstructured", "ADMM lossless"),
            ("resnet18-imagenet", "structured", "ADMM lossy"),
            ("vgg16-cifar10", "nonstructured", "ADMM"),
            ("resnet18-cifar10", "structured", "ADMM"),
            ("lenet5-mnist", "baseline", "baseline"),
            ("lenet5-mnist", "nonstructured", "Han"),
        ]:
            assert checks[key].store_within_tolerance, key

    def test_alexnet_store_values(self, tables):
        checks = {(c.table, c.regime, c.method): c for c in check_tables(tables)}
        assert checks["alexnet-imagenet", "nonstructured", "ADMM"].weight_store == pytest.approx(262_500)
        assert checks["alexnet-imagenet", "structured", "ADMM"].weight_store == pytest.approx(568_750)
        assert checks["lenet5-mnist", "baseline", "baseline"].weight_store == pytest.approx(102_000)

    def test_relative_totals_sit_above_the_bound(self, tables):
        relative = [c for c in check_tables(tables) if c.relative_ratio is not None]
        assert len(relative) == 9
        for check in relative:
            assert check.relative_ok, (check.table, check.method)
            assert 1.0 <= check.relative_ratio <= 1.40

    def test_only_alexnet_compress_rates_disagree(self, tables):
        bad = {(c.table, c.regime) for c in check_tables(tables) if c.compress_ok is False}
        assert bad == {("alexnet-imagenet", "nonstructured"), ("alexnet-imagenet", "structured")}

    def test_rate_ratios(self, tables):
        pairs = rate_pairs(tables)
        assert [p.ratio_percent for p in pairs] == [46, 39, 48, 87, 87, 80, 77]
        assert all(39 <= p.ratio_percent <= 87 for p in pairs)
        assert all(p.compute.winner == "structured" for p in pairs)

    def test_storage_winners(self, tables):
        winners = [p.storage.winner for p in rate_pairs(tables)]
        assert winners == ["nonstructured", "nonstructured", "nonstructured",
                           "structured", "structured", "structured", "structured"]

    def test_frames(self, tables):
        checks, pairs = checks_frame(check_tables(tables)), pairs_frame(rate_pairs(tables))
        assert len(pairs) == 7
        assert "notes" in checks.columns
        assert set(pairs["compute"]) == {"structured"}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError) as exc:
            load_tables(tmp_path / "none.json")
        assert exc.value.field == "input"

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"tables": [{"id": "x"}]}')
        with pytest.raises(ConfigError):
            load_tables(path)


class TestOverallVerdict:
    def test_storage_disagreement_is_annotated(self):
        compute = decide_compute("6.4", "2.5")
        ns = report_from_counts(1.75e6, 11.2e6, 6, index_bits=5)
        s = report_from_counts(4.46e6, 11.2e6, 6, regime="structured")
        winner, notes = overall_verdict(compute, decide_storage(ns, s))
        assert winner == "structured"
        assert STORAGE_CAVEAT in notes

    def test_agreement_has_no_notes(self):
        compute = decide_compute("11.2", "5.1")
        s = report_from_counts(100, 1000, 3, regime="structured")
        ns = report_from_counts(100, 1000, 3, index_bits=4)
        assert overall_verdict(compute, decide_storage(ns, s)) == ("structured", [])


def _identity_quantizer(model, bits, dataset, schedule, config, settings, regime):
    return model


def _tagging_quantizer(model, bits, dataset, schedule, config, settings, regime):
    out = copy.deepcopy(model)
    out.scored_as = regime
    return out


class TestComparator:
    @pytest.fixture(scope="class")
    def baseline(self, tiny_dataset):
        config = TrainConfig(learning_rate=0.05, batch_size=16, epochs=4)
        return Trainer(config).fit(tiny_net(0), tiny_dataset)

    def _settings(self, **kwargs):
        defaults = dict(accuracy_band=math.inf, nonstructured_rate=4.0, column_rate=2.0, filter_rate=2.0,
                        admm_epochs=1, retrain_epochs=1, max_retries=0, scope="conv")
        defaults.update(kwargs)
        return ComparisonSettings(**defaults)

    def test_end_to_end(self, baseline, tiny_dataset):
        config = TrainConfig(learning_rate=0.05, batch_size=32, epochs=1)
        report = run_comparison(baseline, tiny_dataset, self._settings(), RhoSchedule(max_iterations=1),
                                config, quantizer=_identity_quantizer)
        assert report.nonstructured.prune_rate >= 4.0
        assert report.structured.prune_rate >= 2.0
        assert report.exit_code in (EXIT_STRUCTURED, EXIT_NONSTRUCTURED)
        assert report.overall == report.compute.winner
        assert all(step.accepted for step in report.nonstructured.steps + report.structured.steps)
        assert "overall" in report.render()

        restored = ComparisonReport.from_dict(report.to_dict())
        assert restored.compute == report.compute
        assert restored.storage == report.storage
        assert restored.overall == report.overall

    def test_unreachable_band(self, baseline, tiny_dataset):
        config = TrainConfig(learning_rate=0.05, batch_size=32, epochs=1)
        with pytest.raises(ConfigError) as exc:
            run_comparison(baseline, tiny_dataset, self._settings(accuracy_band=-2.0),
                           RhoSchedule(max_iterations=1), config, quantizer=_identity_quantizer)
        assert exc.value.field == "comparison.accuracy_band"

    def test_back_off_halves_the_increment(self, baseline, tiny_dataset):
        def prune(model, rate):
            if rate > 2.0:
                raise AccuracyCollapseError("too far")
            return model

        steps = []
        _search("nonstructured", baseline, 5.0, prune, 0.0, tiny_dataset,
                self._settings(max_retries=4), steps)
        assert [s.target for s in steps] == [5.0, 3.0, 2.0]
        assert [s.accepted for s in steps] == [False, False, True]

    def test_failed_step_is_skipped(self, baseline, tiny_dataset):
        def prune(model, rate):
            raise AccuracyCollapseError("never")

        steps = []
        result = _search("column", baseline, 4.0, prune, 0.0, tiny_dataset, self._settings(max_retries=1), steps)
        assert result is baseline
        assert steps == [StepRecord("column", 4.0, False, -math.inf),
                         StepRecord("column", 2.5, False, -math.inf)]

    def test_regimes_must_match_each_other(self, baseline, tiny_dataset, monkeypatch):
        # both regimes clear baseline - band, but sit 0.04 apart
        scores = {"nonstructured": 0.92, "structured": 0.88}

        monkeypatch.setattr("comparison.comparator.evaluate",
                            lambda model, data: scores.get(getattr(model, "scored_as", None), 0.90))
        config = TrainConfig(learning_rate=0.05, batch_size=32, epochs=1)
        with pytest.raises(AccuracyMismatchError, match="band"):
            run_comparison(baseline, tiny_dataset, self._settings(accuracy_band=0.03),
                           RhoSchedule(max_iterations=1), config, quantizer=_tagging_quantizer)

    def test_matched_regimes_are_judged(self, baseline, tiny_dataset, monkeypatch):
        scores = {"nonstructured": 0.91, "structured": 0.89}

        monkeypatch.setattr("comparison.comparator.evaluate",
                            lambda model, data: scores.get(getattr(model, "scored_as", None), 0.90))
        config = TrainConfig(learning_rate=0.05, batch_size=32, epochs=1)
        report = run_comparison(baseline, tiny_dataset, self._settings(accuracy_band=0.03),
                                RhoSchedule(max_iterations=1), config, quantizer=_tagging_quantizer)
        assert (report.nonstructured.accuracy, report.structured.accuracy) == (0.91, 0.89)
