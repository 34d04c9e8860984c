"""Tests for the synthetic dataset, the SGD optimizer and toy training runs."""

import math
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from networks.remdet.src.blocks import BlockModule, assign_tensor, build_block, tensor_at
from networks.remdet.src.errors import DivergedLossError, InvalidConfigError, ShapeMismatchError
from networks.remdet.src.reparam import count_fused_blocks, fuse_model
from networks.remdet.src.tape import no_tape
from networks.remdet.src.tensor import Tensor
from networks.remdet.src.toy_train import (
    SgdState,
    ToyDataset,
    build_toy_model,
    compute_gradients,
    evaluate,
    fit,
    gen_synthetic,
    linear_probe,
    sgd_update,
    train_toy,
    train_toy_model,
)
from shared.models import BlockKind, ConvModuleCfg, ConvSpec, DType, RepMode, SgdHyper
from shared.monitoring import MetricsTracker


@pytest.fixture
def dataset() -> ToyDataset:
    """Small four-class dataset."""
    return gen_synthetic(seed=5, n=64)


@pytest.fixture
def tracker() -> MetricsTracker:
    """Tracker that never reaches MLflow."""
    return MetricsTracker(experiment_name="remdet-toy-test", enabled=False)


@pytest.fixture
def scalar_module() -> BlockModule:
    """A 1x1 ConvModule whose single weight is 1.0."""
    module = build_block(ConvModuleCfg(spec=ConvSpec.pointwise(1, 1)), 0, dtype=DType.F64)
    assign_tensor(module.params, "conv.weight", Tensor(np.ones((1, 1, 1, 1))))
    return module


class TestSyntheticData:
    """Tests for the oriented-bar dataset."""

    def test_deterministic(self) -> None:
        """Test that a seed reproduces images and labels exactly."""
        first = gen_synthetic(3, 64)
        second = gen_synthetic(3, 64)
        np.testing.assert_array_equal(first.images.numpy(), second.images.numpy())
        np.testing.assert_array_equal(first.labels, second.labels)
        assert not np.array_equal(first.images.numpy(), gen_synthetic(4, 64).images.numpy())

    def test_class_balance(self) -> None:
        """Test that class sizes differ by at most one."""
        assert gen_synthetic(0, 400).class_counts() == [100, 100, 100, 100]
        counts = gen_synthetic(0, 203, classes=3).class_counts()
        assert max(counts) - min(counts) <= 1

    def test_shape_and_range(self, dataset: ToyDataset) -> None:
        """Test images are single-channel 32x32 with values in [0, 1]."""
        images = dataset.images.numpy()
        assert images.shape == (64, 1, 32, 32)
        assert images.dtype == np.float32
        assert images.min() >= 0.0
        assert images.max() <= 1.0
        assert set(dataset.labels.tolist()) == {0, 1, 2, 3}

    def test_invalid_arguments(self) -> None:
        """Test class counts outside 2..8 and too few samples are rejected."""
        with pytest.raises(ValueError):
            gen_synthetic(0, 200, classes=9)
        with pytest.raises(ValueError):
            gen_synthetic(0, 16, classes=4)

    def test_learnable_by_linear_probe(self) -> None:
        """Test that a pixel-level softmax regression separates the classes."""
        assert linear_probe(gen_synthetic(0, 256)) >= 0.6

    def test_mismatched_labels(self, dataset: ToyDataset) -> None:
        """Test that images and labels must describe the same samples."""
        with pytest.raises(ShapeMismatchError):
            ToyDataset(images=dataset.images, labels=dataset.labels[:10], seed=0, classes=4)


class TestSgd:
    """Tests for the momentum SGD update and the learning-rate schedule."""

    def test_two_momentum_steps(self, scalar_module: BlockModule) -> None:
        """Test p=1 under gradient 2p goes to 0.8 then 0.46."""
        hyper = SgdHyper(lr=0.1, momentum=0.9, weight_decay=0.0)
        state = SgdState()
        expected = [0.8, 0.46]
        for value in expected:
            weight = tensor_at(scalar_module.params, "conv.weight").numpy()
            sgd_update(scalar_module.params, {"conv.weight": Tensor(2 * weight)}, hyper, state)
            updated = tensor_at(scalar_module.params, "conv.weight").numpy()
            assert updated.item() == pytest.approx(value, abs=1e-12)
        assert state.steps == 2

    def test_batchnorm_exempt_from_decay(self, scalar_module: BlockModule) -> None:
        """Test weight decay shrinks conv weights but not BN gamma."""
        hyper = SgdHyper(lr=0.1, momentum=0.0, weight_decay=0.5)
        grads = {
            "conv.weight": Tensor(np.zeros((1, 1, 1, 1))),
            "bn.gamma": Tensor(np.zeros(1)),
        }
        sgd_update(scalar_module.params, grads, hyper, SgdState())
        assert tensor_at(scalar_module.params, "conv.weight").numpy().item() == pytest.approx(0.95)
        assert tensor_at(scalar_module.params, "bn.gamma").numpy().item() == 1.0

    def test_gradient_shape_mismatch(self, scalar_module: BlockModule) -> None:
        """Test that a gradient of the wrong shape is rejected."""
        with pytest.raises(ShapeMismatchError):
            sgd_update(
                scalar_module.params,
                {"conv.weight": Tensor(np.zeros(2))},
                SgdHyper(),
                SgdState(),
            )

    def test_constant_schedule(self) -> None:
        """Test the constant schedule ignores the step."""
        hyper = SgdHyper(lr=0.05)
        assert hyper.lr_at(0, 100) == hyper.lr_at(99, 100) == 0.05

    def test_flat_cosine_schedule(self) -> None:
        """Test flat first half, cosine midpoint and floor at the last step."""
        hyper = SgdHyper(lr=0.1, schedule="flat_cosine", min_lr_ratio=0.01)
        assert hyper.lr_at(3, 9) == 0.1
        assert hyper.lr_at(6, 9) == pytest.approx(0.001 + 0.099 * 0.5)
        assert hyper.lr_at(8, 9) == pytest.approx(0.001)


class TestToyTraining:
    """Tests for toy model construction and training runs."""

    def test_unsupported_block(self) -> None:
        """Test that only the three FFN families are trainable toys."""
        with pytest.raises(InvalidConfigError) as excinfo:
            build_toy_model(BlockKind.CED, 1.0)
        assert excinfo.value.path == "block"

    def test_zero_steps(self, tracker: MetricsTracker) -> None:
        """Test an untrained model sits near chance loss ln(4)."""
        result = train_toy("convffn", 1.0, 0, seed=0, samples=64, tracker=tracker)
        assert result.loss_curve == []
        assert result.final_loss == result.initial_loss
        assert result.initial_loss == pytest.approx(math.log(4), abs=0.3)

    @pytest.mark.parametrize(
        ("kind", "expansion"),
        [(BlockKind.CONVFFN, 1.0), (BlockKind.MULT, 2.0), (BlockKind.GATEDFFN, 3.0)],
    )
    def test_gradient_flow(self, kind: BlockKind, expansion: float, dataset: ToyDataset) -> None:
        """Test every trainable tensor receives a finite, nonzero gradient."""
        model = build_toy_model(kind, expansion, seed=1)
        images, labels = dataset.batch(np.arange(8))
        loss, grads = compute_gradients(model, images, labels)
        assert math.isfinite(loss)
        assert set(grads) == {name for name, _ in model.named_tensors(trainable_only=True)}
        for name, grad in grads.items():
            values = grad.numpy()
            assert np.isfinite(values).all(), name
            assert np.abs(values).max() > 0, f"{name} receives no gradient"

    def test_seeded_runs_repeat(self, tracker: MetricsTracker) -> None:
        """Test two runs with the same seed give identical curves."""
        first = train_toy("mult", 2.0, 5, seed=3, samples=64, batch_size=16, tracker=tracker)
        second = train_toy("mult", 2.0, 5, seed=3, samples=64, batch_size=16, tracker=tracker)
        assert first.loss_curve == second.loss_curve
        assert len(first.loss_curve) == 5
        assert first.final_loss == pytest.approx(sum(first.loss_curve) / 5)

    def test_divergence(self, dataset: ToyDataset) -> None:
        """Test that a NaN loss stops training."""
        model = build_toy_model(BlockKind.CONVFFN, 1.0)
        with patch(
            "networks.remdet.src.toy_train.compute_gradients",
            return_value=(float("nan"), {}),
        ):
            with pytest.raises(DivergedLossError):
                fit(model, dataset, 3, SgdHyper())

    def test_reports_to_tracker(self) -> None:
        """Test the loss curve and final metrics are sent to the tracker."""
        tracker = MagicMock(spec=MetricsTracker)
        tracker.start_run.return_value.__enter__.return_value = None
        result = train_toy("convffn", 1.0, 2, seed=0, samples=64, tracker=tracker)
        tracker.log_curve.assert_called_once_with("loss", result.loss_curve)
        logged = tracker.log_metrics.call_args.args[0]
        assert logged["final_loss"] == result.final_loss
        assert tracker.start_run.call_args.kwargs["run_name"] == "train-toy-convffn-e1-s0"

    @pytest.mark.slow
    @pytest.mark.parametrize(
        ("kind", "expansion"),
        [(BlockKind.CONVFFN, 1.0), (BlockKind.MULT, 2.0), (BlockKind.GATEDFFN, 3.0)],
    )
    def test_trains_below_chance(
        self, kind: BlockKind, expansion: float, tracker: MetricsTracker
    ) -> None:
        """Test 500 steps bring the loss under ln(4) and the last 100 below the first 100."""
        result = train_toy(kind, expansion, 500, seed=42, tracker=tracker)
        curve = result.loss_curve
        assert len(curve) == 500
        assert np.mean(curve[400:500]) < np.mean(curve[0:100])
        assert result.final_loss <= 0.7
        assert result.final_train_acc > 0.5

    @pytest.mark.slow
    def test_fused_model_predicts_alike(self, tracker: MetricsTracker) -> None:
        """Test a trained GatedFFN toy keeps its train accuracy and predictions after fusion."""
        model, _ = train_toy_model("gatedffn", 3.0, 100, seed=7, tracker=tracker)
        data = gen_synthetic(7, 512)
        fused = fuse_model(model)
        _, accuracy = evaluate(model, data)
        _, fused_accuracy = evaluate(fused, data)
        assert fused_accuracy == accuracy
        assert fused.cfg.mode is RepMode.DEPLOY
        assert count_fused_blocks(fused) == 2
        with no_tape():
            logits = model.classify(data.images).numpy()
            fused_logits = fused.classify(data.images).numpy()
        np.testing.assert_array_equal(logits.argmax(axis=1), fused_logits.argmax(axis=1))
        assert float(np.max(np.abs(logits - fused_logits))) <= 1e-4
