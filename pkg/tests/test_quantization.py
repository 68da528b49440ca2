"""
Tests for equal-distance level sets, calibration and ADMM quantization.
"""

import numpy as np
import pytest
import torch

from compression.admm import RhoSchedule
from compression.projections import ConstraintSpec
from compression.quantization import (
    LevelSet,
    calibrate,
    calibrate_model,
    projection_distance,
    quantize_model,
)
from compression.verify import verify_model
from models.network import with_weights
from tests.conftest import tiny_net


class TestLevelSet:
    def test_binary_and_ternary(self):
        np.testing.assert_allclose(LevelSet.binary(0.5).levels(), [-0.5, 0.5])
        np.testing.assert_allclose(LevelSet.ternary(0.5).levels(), [-0.5, 0.0, 0.5])

    def test_levels_are_symmetric_and_equally_spaced(self):
        for count in range(1, 9):
            levels = LevelSet(count, 0.3).levels()
            np.testing.assert_allclose(levels, -levels[::-1], atol=1e-15)
            np.testing.assert_allclose(np.diff(levels), 0.3)
            assert (0.0 in levels) == LevelSet(count, 0.3).has_zero

    def test_counts_for_bits(self):
        assert LevelSet.count_for_bits(3) == 8
        assert LevelSet.count_for_bits(3, include_zero=True) == 7
        assert LevelSet.count_for_bits(1, include_zero=True) == 2
        assert LevelSet(7, 1.0).bits == 3
        assert LevelSet(2, 1.0).bits == 1
        with pytest.raises(ValueError):
            LevelSet.count_for_bits(0)

    def test_levels_feed_the_projection(self):
        ConstraintSpec.quantization(LevelSet(5, 0.1).levels())

    def test_validation(self):
        with pytest.raises(ValueError):
            LevelSet(0, 1.0)
        with pytest.raises(ValueError):
            LevelSet(3, 0.0)


class TestCalibration:
    def test_no_worse_than_a_brute_force_grid(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            w = rng.normal(scale=0.1, size=200)
            best = calibrate(w, 4)
            peak = np.max(np.abs(w))
            for spacing in np.linspace(peak / 50, peak, 25):
                grid = projection_distance(w, LevelSet(4, spacing).levels())
                assert projection_distance(w, best.levels()) <= grid * (1 + 0.05)

    def test_pruned_weights_do_not_vote(self):
        w = np.array([0.0, 0.0, 0.0, 1.0, -1.0])
        where = w != 0
        assert calibrate(w, 2, where).levels() == pytest.approx([-1.0, 1.0], rel=0.02)

    def test_all_zero_layer(self):
        assert calibrate(np.zeros(5), 3).spacing == 1.0

    def test_model_levels(self):
        levels = calibrate_model(tiny_net(0), 2)
        assert set(levels) == {"conv1", "fc1"}
        assert all(len(lv) == 4 for lv in levels.values())


class TestQuantizeModel:
    @pytest.mark.parametrize("dtype", [torch.float64, torch.float32])
    def test_all_weights_on_levels(self, tiny_dataset, fast_config, dtype):
        model = quantize_model(tiny_net(1, dtype=dtype), 3, tiny_dataset, RhoSchedule(max_iterations=2), fast_config,
                               admm_epochs=2, retrain_epochs=1)
        for name, w in model.weight_arrays().items():
            assert np.all(np.isin(w, model.levels[name]))
            assert len(model.levels[name]) == 8
        assert verify_model(model).ok

    def test_pruned_weights_stay_zero(self, tiny_dataset, fast_config):
        model = tiny_net(2)
        w = model.weight_arrays()["conv1"]
        mask = np.abs(w) > np.median(np.abs(w))
        pruned = with_weights(model, {"conv1": w * mask}, {"conv1": mask})
        quantized = quantize_model(pruned, 2, tiny_dataset, RhoSchedule(max_iterations=1), fast_config,
                                   admm_epochs=1, retrain_epochs=1, layers=["conv1"])
        out = quantized.weight_arrays()["conv1"]
        assert np.all(out[~mask] == 0)
        assert set(quantized.levels) == {"conv1"}
        assert verify_model(quantized).ok

    def test_float32_levels_are_stored_as_the_weights_hold_them(self, tiny_dataset, fast_config):
        levels = {"fc1": np.array([-0.3, -0.1, 0.1, 0.3])}
        model = quantize_model(tiny_net(3, dtype=torch.float32), 2, tiny_dataset, RhoSchedule(max_iterations=1),
                               fast_config, admm_epochs=1, retrain_epochs=1, layers=["fc1"], levels=levels)
        stored = model.levels["fc1"]
        np.testing.assert_array_equal(stored, levels["fc1"].astype(np.float32).astype(np.float64))
        assert stored[2] != 0.1
        assert np.all(np.isin(model.weight_arrays()["fc1"], stored))
        assert verify_model(model).ok
