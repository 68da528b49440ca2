"""
Tests for the training backend: gradients, frozen coordinates, the ADMM term.
"""

import numpy as np
import pandas as pd
import pytest
import torch

from models.network import ConvNet, LayerSpec, with_weights
from training.trainer import (
    RegularizerTarget,
    TrainConfig,
    Trainer,
    backward,
    forward,
    sgd_step,
    write_history,
)
from tests.conftest import tiny_net

GRAD_SPECS = (
    LayerSpec("conv1", "conv", 1, 2, kernel=3, padding=1, pooling="max2"),
    LayerSpec("fc1", "fc", 18, 3, activation="none"),
)


def _grad_net(seed: int) -> ConvNet:
    torch.manual_seed(seed)
    return ConvNet(GRAD_SPECS, (1, 6, 6), arch="grad").to(torch.float64)


def _batch(seed: int, n: int = 4, size: int = 6, classes: int = 3):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 1, size, size, generator=gen, dtype=torch.float64)
    y = torch.randint(0, classes, (n,), generator=gen)
    return x, y


def _loss(model: ConvNet, batch) -> float:
    with torch.no_grad():
        return float(forward(model, batch).loss)


class TestGradients:
    """Backpropagation agrees with central differences in float64."""

    @pytest.mark.parametrize("seed", range(20))
    def test_central_differences(self, seed):
        model = _grad_net(seed)
        batch = _batch(seed)
        grads = backward(model, batch)
        eps = 1e-6
        for key, grad in grads.items():
            layer, kind = key.rsplit(".", 1)
            param = getattr(model.layers[layer], kind)
            numeric = torch.zeros_like(param)
            flat = param.data.view(-1)
            for i in range(flat.numel()):
                original = float(flat[i])
                flat[i] = original + eps
                plus = _loss(model, batch)
                flat[i] = original - eps
                minus = _loss(model, batch)
                flat[i] = original
                numeric.view(-1)[i] = (plus - minus) / (2 * eps)
            scale = max(float(grad.abs().max()), 1e-8)
            assert float((grad - numeric).abs().max()) / scale <= 1e-4, key

    def test_masked_gradient_is_zero(self, tiny_model):
        mask = torch.ones_like(tiny_model.weight("conv1"), dtype=torch.bool)
        mask[0] = False
        batch = _batch(0, size=10, classes=10)
        grads = backward(tiny_model, batch, masks={"conv1": mask})
        assert torch.all(grads["conv1.weight"][0] == 0)


class TestFrozenCoordinates:
    """Masked weights stay bit-exact zeros through training."""

    def test_hundred_steps(self, tiny_model):
        rng = np.random.default_rng(0)
        weights = tiny_model.weight_arrays()
        masks = {name: rng.random(w.shape) < 0.5 for name, w in weights.items()}
        pruned = {name: np.where(masks[name], w, 0.0) for name, w in weights.items()}
        model = with_weights(tiny_model, pruned, masks)
        config = TrainConfig(learning_rate=0.05, momentum=0.9)
        velocity = {}
        for step in range(100):
            grads = backward(model, _batch(step, size=10, classes=10))
            model = sgd_step(model, grads, config, velocity=velocity)
        for name, w in model.weight_arrays().items():
            assert np.all(w[~masks[name]] == 0.0)

    def test_bias_of_dead_filter_is_frozen(self, tiny_model, tiny_dataset):
        mask = np.ones(tiny_model.weight("conv1").shape, dtype=bool)
        mask[1] = False
        w = tiny_model.weight_arrays()["conv1"] * mask
        model = with_weights(tiny_model, {"conv1": w}, {"conv1": mask})
        bias_before = model.bias("conv1").detach().clone()
        trained = Trainer(TrainConfig(learning_rate=0.05, batch_size=32, epochs=2)).fit(model, tiny_dataset)
        assert torch.equal(trained.bias("conv1")[1], bias_before[1])
        assert not torch.equal(trained.bias("conv1")[0], bias_before[0])

    def test_bias_mask_overrides_frozen_weights(self, tiny_model, tiny_dataset):
        frozen = {"conv1": torch.zeros(tiny_model.weight("conv1").shape, dtype=torch.bool)}
        bias_before = tiny_model.bias("conv1").detach().clone()
        trainer = Trainer(TrainConfig(learning_rate=0.05, batch_size=32, epochs=1))
        still = trainer.fit(tiny_model, tiny_dataset, masks=frozen)
        assert torch.equal(still.bias("conv1"), bias_before)
        moved = trainer.fit(tiny_model, tiny_dataset, masks=frozen,
                            bias_masks={"conv1": torch.ones(4, dtype=torch.bool)})
        np.testing.assert_array_equal(moved.weight_arrays()["conv1"], tiny_model.weight_arrays()["conv1"])
        assert not torch.equal(moved.bias("conv1"), bias_before)

    def test_zero_learning_rate_keeps_weights(self, tiny_model):
        grads = backward(tiny_model, _batch(1, size=10, classes=10))
        stepped = sgd_step(tiny_model, grads, TrainConfig(), learning_rate=0.0)
        for name, w in tiny_model.weight_arrays().items():
            np.testing.assert_array_equal(stepped.weight_arrays()[name], w)


class TestTrainer:
    def test_zero_rho_matches_plain_training(self, tiny_dataset, fast_config):
        model = tiny_net(1)
        target = torch.zeros_like(model.weight("conv1"))
        plain = Trainer(fast_config).fit(model, tiny_dataset)
        regularized = Trainer(fast_config).fit(model, tiny_dataset,
                                               regularizer={"conv1": RegularizerTarget(0.0, target)})
        for name, w in plain.weight_arrays().items():
            np.testing.assert_array_equal(regularized.weight_arrays()[name], w)

    def test_regularizer_pulls_toward_target(self, tiny_dataset, fast_config):
        model = tiny_net(2)
        target = torch.zeros_like(model.weight("conv1"))
        plain = Trainer(fast_config).fit(model, tiny_dataset)
        pulled = Trainer(fast_config).fit(model, tiny_dataset,
                                          regularizer={"conv1": RegularizerTarget(5.0, target)})
        assert np.linalg.norm(pulled.weight_arrays()["conv1"]) < np.linalg.norm(plain.weight_arrays()["conv1"])

    def test_fit_is_deterministic_and_leaves_input_untouched(self, tiny_dataset, fast_config):
        model = tiny_net(3)
        before = model.weight_arrays()
        a = Trainer(fast_config).fit(model, tiny_dataset)
        b = Trainer(fast_config).fit(model, tiny_dataset)
        for name in before:
            np.testing.assert_array_equal(model.weight_arrays()[name], before[name])
            np.testing.assert_array_equal(a.weight_arrays()[name], b.weight_arrays()[name])

    def test_learns_the_synthetic_task(self, tiny_dataset):
        trainer = Trainer(TrainConfig(learning_rate=0.05, batch_size=16, epochs=8))
        trainer.fit(tiny_net(4), tiny_dataset)
        assert len(trainer.history) == 8
        assert trainer.history[-1].loss < trainer.history[0].loss

    def test_history_csv(self, tiny_dataset, fast_config, tmp_path):
        trainer = Trainer(fast_config)
        trainer.fit(tiny_net(5), tiny_dataset, log_path=tmp_path / "log.csv")
        write_history(trainer.history, tmp_path / "log.csv", append=True)
        frame = pd.read_csv(tmp_path / "log.csv")
        assert list(frame.columns) == ["epoch", "loss", "accuracy", "regularizer"]
        assert len(frame) == 2 * fast_config.epochs

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(momentum=1.0)
        assert TrainConfig(learning_rate=1.0, lr_decay_every=2, lr_decay_factor=0.5).lr_at(5) == 0.25
