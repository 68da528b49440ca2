"""
Tests for ADMM regularization, masked mapping and state persistence.
"""

import copy
import math

import numpy as np
import pytest
import torch

from compression.admm import (
    AdmmState,
    RhoSchedule,
    admm_regularize,
    admm_update,
    init_admm_state,
    load_state,
    masked_map_retrain_prune,
    masked_map_retrain_quant,
    save_state,
)
from compression.projections import ConstraintSpec, is_feasible
from compression.verify import verify_model
from models.errors import CheckpointError
from models.network import with_weights
from training.trainer import TrainConfig, Trainer
from tests.conftest import tiny_net


class _Stop(Exception):
    pass


class TestAdmmUpdate:
    """Z is a projection of W + U and U accumulates W - Z exactly."""

    def test_dual_identity_and_feasibility(self):
        rng = np.random.default_rng(0)
        schedule = RhoSchedule()
        specs = {"a": ConstraintSpec.nonstructured(5), "b": ConstraintSpec.column(2)}
        weights = {"a": rng.normal(size=(3, 2, 2, 2)), "b": rng.normal(size=(4, 6))}
        state = init_admm_state(weights, specs, schedule)
        for _ in range(12):
            new = {name: w + rng.normal(scale=0.1, size=w.shape) for name, w in state.W.items()}
            updated = admm_update(state, new, schedule)
            for name, spec in specs.items():
                np.testing.assert_array_equal(updated.U[name], state.U[name] + (new[name] - updated.Z[name]))
                assert is_feasible(updated.Z[name], spec)
            state = updated
        assert state.iteration == 12
        assert state.rho["a"] == pytest.approx(1.5e-3 * 1.5 ** 12)
        assert [trace["a"] for trace in state.rho_trace] == pytest.approx([1.5e-3 * 1.5 ** k for k in range(12)])

    def test_initial_state(self):
        specs = {"a": ConstraintSpec.nonstructured(1)}
        state = init_admm_state({"a": np.array([[1.0, -3.0]])}, specs, RhoSchedule())
        np.testing.assert_array_equal(state.Z["a"], [[0.0, -3.0]])
        assert np.all(state.U["a"] == 0)

    def test_scalar_problem_reaches_nearest_level(self):
        """min (w - 2)^2 over w in {0, 1}: the W-step has a closed form."""
        schedule = RhoSchedule(initial=0.5, growth=1.5, max_iterations=30)
        specs = {"w": ConstraintSpec.quantization([0.0, 1.0])}
        state = init_admm_state({"w": np.array([2.0])}, specs, schedule)
        for _ in range(schedule.max_iterations):
            rho = state.rho["w"]
            w = (4.0 + rho * (state.Z["w"] - state.U["w"])) / (2.0 + rho)
            state = admm_update(state, {"w": w}, schedule)
        assert state.Z["w"][0] == 1.0
        assert state.W["w"][0] == pytest.approx(1.0, abs=1e-3)

    def test_growing_residuals_are_flagged(self):
        schedule = RhoSchedule()
        specs = {"a": ConstraintSpec.nonstructured(1)}
        state = init_admm_state({"a": np.zeros(4)}, specs, schedule)
        for k in range(1, 6):
            state = admm_update(state, {"a": np.full(4, float(k) ** 2)}, schedule)
        assert state.warnings
        assert "residual of a" in state.warnings[-1]

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            RhoSchedule(initial=0.0)
        with pytest.raises(ValueError):
            RhoSchedule(growth=0.9)


class TestAdmmRegularize:
    def test_unconstrained_is_plain_training(self, tiny_dataset, fast_config):
        model = tiny_net(0)
        plain = Trainer(fast_config).fit(model, tiny_dataset)
        regularized, state = admm_regularize(model, {}, tiny_dataset, RhoSchedule(max_iterations=2), fast_config)
        assert state.iteration == 0 and not state.specs
        for name, w in plain.weight_arrays().items():
            np.testing.assert_array_equal(regularized.weight_arrays()[name], w)

    def test_runs_the_schedule(self, tiny_dataset, fast_config):
        schedule = RhoSchedule(max_iterations=3)
        seen = []
        _, state = admm_regularize(tiny_net(1), {"conv1": ConstraintSpec.nonstructured(10)}, tiny_dataset,
                                   schedule, fast_config, on_iteration=lambda m, s: seen.append(s.iteration))
        assert seen == [1, 2, 3]
        assert len(state.residuals) == 3 and len(state.accuracy) == 3
        assert is_feasible(state.Z["conv1"], state.specs["conv1"])

    def test_resume_matches_uninterrupted_run(self, tiny_dataset):
        config = TrainConfig(learning_rate=0.05, batch_size=32, epochs=4)
        schedule = RhoSchedule(max_iterations=4)
        specs = {"conv1": ConstraintSpec.nonstructured(12), "fc1": ConstraintSpec.nonstructured(300)}
        full, _ = admm_regularize(tiny_net(2), specs, tiny_dataset, schedule, config)

        saved = {}

        def interrupt(model, state):
            if state.iteration == 2:
                saved["model"], saved["state"] = copy.deepcopy(model), copy.deepcopy(state)
                raise _Stop

        with pytest.raises(_Stop):
            admm_regularize(tiny_net(2), specs, tiny_dataset, schedule, config, on_iteration=interrupt)
        resumed, state = admm_regularize(saved["model"], specs, tiny_dataset, schedule, config,
                                         state=saved["state"])
        assert state.iteration == 4
        for name, w in full.weight_arrays().items():
            np.testing.assert_array_equal(resumed.weight_arrays()[name], w)


class TestMaskedMapping:
    def test_prune_result_is_feasible(self, tiny_dataset, fast_config):
        specs = {"conv1": ConstraintSpec.column(3), "fc1": ConstraintSpec.nonstructured(200)}
        pruned = masked_map_retrain_prune(tiny_net(3), specs, tiny_dataset, fast_config, epochs=1)
        assert verify_model(pruned, specs).ok
        weights = pruned.weight_arrays()
        for name in specs:
            assert np.all(weights[name][~pruned.mask_array(name)] == 0)

    def test_filter_pruning_propagates(self, tiny_dataset, fast_config):
        specs = {"conv1": ConstraintSpec.filter(2)}
        pruned = masked_map_retrain_prune(tiny_net(4), specs, tiny_dataset, fast_config, epochs=1,
                                          propagate_filters=True)
        w = pruned.weight_arrays()
        dead = [f for f in range(4) if np.all(w["conv1"][f] == 0)]
        assert len(dead) == 2
        for f in dead:
            assert np.all(w["fc1"][:, f * 25:(f + 1) * 25] == 0)
            assert float(pruned.bias("conv1")[f]) == 0.0

    def test_quant_lands_on_levels_and_keeps_zeros(self, tiny_dataset, fast_config):
        pruned = masked_map_retrain_prune(tiny_net(5), {"conv1": ConstraintSpec.nonstructured(12)},
                                          tiny_dataset, fast_config, epochs=1)
        levels = {"conv1": np.array([-0.3, -0.15, 0.0, 0.15, 0.3]), "fc1": np.array([-0.1, 0.1])}
        quantized = masked_map_retrain_quant(pruned, levels, 0.2, tiny_dataset, fast_config, epochs=1)
        w = quantized.weight_arrays()
        assert np.all(np.isin(w["conv1"], levels["conv1"]))
        assert np.all(np.isin(w["fc1"], levels["fc1"]))
        assert np.all(w["conv1"][~pruned.mask_array("conv1")] == 0)
        assert verify_model(quantized).ok

    def test_absorbed_zeros_join_the_mask(self, tiny_dataset, fast_config):
        levels = {"conv1": np.array([-0.5, 0.0, 0.5])}
        quantized = masked_map_retrain_quant(tiny_net(6), levels, 0.2, tiny_dataset, fast_config,
                                             epochs=1, absorb_zeros=True)
        mask = quantized.mask_array("conv1")
        w = quantized.weight_arrays()["conv1"]
        np.testing.assert_array_equal(mask, w != 0)

    def test_float32_quant_verifies(self, tiny_dataset, fast_config):
        levels = {"conv1": np.array([-0.3, -0.1, 0.1, 0.3]), "fc1": np.array([-0.1, 0.0, 0.1])}
        quantized = masked_map_retrain_quant(tiny_net(5, dtype=torch.float32), levels, 0.2, tiny_dataset,
                                             fast_config, epochs=1)
        for name, w in quantized.weight_arrays().items():
            assert np.all(np.isin(w, quantized.levels[name]))
        assert verify_model(quantized).ok

    def test_biases_of_fully_snapped_layers_keep_training(self, tiny_dataset, fast_config):
        model = tiny_net(7)
        w = model.weight_arrays()
        w["conv1"] = np.where(w["conv1"] >= 0, 0.3, -0.3)
        model = with_weights(model, w)
        levels = {"conv1": np.array([-0.3, 0.0, 0.3]), "fc1": np.array([-0.1, 0.0, 0.1])}
        quantized = masked_map_retrain_quant(model, levels, 0.2, tiny_dataset, fast_config, epochs=1)
        # every conv1 weight sat on a level, so only its biases were free
        np.testing.assert_array_equal(quantized.weight_arrays()["conv1"], w["conv1"])
        assert not torch.equal(quantized.bias("conv1"), model.bias("conv1"))


class TestStatePersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        schedule = RhoSchedule()
        specs = {"a": ConstraintSpec.filter(1), "b": ConstraintSpec.quantization([-1.0, 0.0, 1.0])}
        weights = {"a": rng.normal(size=(2, 1, 3, 3)), "b": rng.normal(size=(3, 4))}
        state = init_admm_state(weights, specs, schedule, where={"a": np.ones((2, 1, 3, 3), bool)})
        state = admm_update(state, weights, schedule)
        loaded = load_state(save_state(state, tmp_path / "state.npz"))
        assert loaded.specs == state.specs
        assert loaded.iteration == 1
        assert loaded.rho == state.rho
        for name in specs:
            np.testing.assert_array_equal(loaded.Z[name], state.Z[name])
            np.testing.assert_array_equal(loaded.U[name], state.U[name])
        assert set(loaded.where) == {"a"}
        assert loaded.residuals == state.residuals

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_state(tmp_path / "absent.npz")

    def test_empty_state_residual(self):
        assert math.isinf(AdmmState({}, {}, {}, {}, {}).max_relative_residual())
