"""Synthetic classification task and SGD loop showing every block trains.

The model is a stem conv, two blocks without downsampling, global average
pooling and a linear head over K classes, trained on 32x32 oriented bars.
"""

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import numpy.typing as npt

from networks.remdet.src.analysis import count_macs_params
from networks.remdet.src.blocks import Model, assign_tensor, build_backbone, tensor_at
from networks.remdet.src.config import metrics_tracker, settings
from networks.remdet.src.errors import DivergedLossError, InvalidConfigError, ShapeMismatchError
from networks.remdet.src.ops import linear, softmax_cross_entropy
from networks.remdet.src.tape import GradTape, no_tape
from networks.remdet.src.tensor import Array, Tensor, to_numpy_dtype
from shared.models import BlockKind, DType, ModelCfg, SgdHyper, TrainResult
from shared.monitoring import MetricsTracker, get_logger

logger = get_logger(__name__)

IMAGE_SIZE = 32
NOISE_SIGMA = 0.05
BAR_HALF_WIDTH = 1.5
BAR_HALF_LENGTH = 10.0
CENTER_JITTER = 2.0
MIN_SAMPLES_PER_CLASS = 8
FINAL_LOSS_WINDOW = 20
EVAL_BATCH = 256

TOY_BLOCK_KINDS = (BlockKind.CONVFFN, BlockKind.MULT, BlockKind.GATEDFFN)

Labels = npt.NDArray[np.int64]


@dataclass(frozen=True)
class ToyDataset:
    """Images [n, 1, 32, 32] in [0, 1] with integer labels in [0, classes)."""

    images: Tensor
    labels: Labels
    seed: int
    classes: int

    def __post_init__(self) -> None:
        n = self.labels.shape[0]
        if self.images.ndim != 4 or self.images.shape[:2] != (n, 1):
            raise ShapeMismatchError(
                f"images {self.images.shape} do not match {n} single-channel samples"
            )

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    def batch(self, indices: npt.NDArray[np.intp]) -> tuple[Tensor, Labels]:
        return Tensor(self.images.numpy()[indices]), self.labels[indices]

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.classes).tolist()


def gen_synthetic(seed: int, n: int, classes: int = 4, dtype: DType = DType.F32) -> ToyDataset:
    """Class k is a bar at angle k*pi/classes with jittered centre and length.

    Labels cycle through the classes before shuffling, so class sizes differ
    by at most one. Additive Gaussian noise (sigma 0.05) is clipped to [0, 1].
    """
    if not 2 <= classes <= 8:
        raise ValueError(f"classes must lie in 2..8, got {classes}")
    if n < MIN_SAMPLES_PER_CLASS * classes:
        raise ValueError(f"need at least {MIN_SAMPLES_PER_CLASS * classes} samples, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    angles = np.pi * labels / classes
    centers = (IMAGE_SIZE - 1) / 2 + rng.uniform(-CENTER_JITTER, CENTER_JITTER, (n, 2))
    half_lengths = BAR_HALF_LENGTH * rng.uniform(0.8, 1.2, n)

    grid = np.arange(IMAGE_SIZE, dtype=np.float64)
    rows, cols = np.meshgrid(grid, grid, indexing="ij")
    dy = rows[None] - centers[:, 0, None, None]
    dx = cols[None] - centers[:, 1, None, None]
    cos = np.cos(angles)[:, None, None]
    sin = np.sin(angles)[:, None, None]
    along = dx * cos + dy * sin
    across = dy * cos - dx * sin
    bars = np.clip(BAR_HALF_WIDTH + 0.5 - np.abs(across), 0.0, 1.0)
    bars = bars * (np.abs(along) <= half_lengths[:, None, None])
    images = np.clip(bars + rng.normal(0.0, NOISE_SIGMA, bars.shape), 0.0, 1.0)
    return ToyDataset(
        images=Tensor(images[:, None].astype(to_numpy_dtype(dtype))),
        labels=labels,
        seed=seed,
        classes=classes,
    )


# Optimizer


@dataclass
class SgdState:
    """Per-tensor momentum buffers keyed by dotted parameter name."""

    velocity: dict[str, Array] = field(default_factory=dict)
    steps: int = 0


def is_batchnorm_param(name: str) -> bool:
    return ".bn." in f".{name}"


def sgd_update(
    params: Any,
    grads: Mapping[str, Tensor],
    hyper: SgdHyper,
    state: SgdState,
    lr: float | None = None,
) -> None:
    """v <- momentum*v + g + wd*p; p <- p - lr*v, in place on the parameter tree.

    Batch-norm gamma/beta get no weight decay. `lr` overrides `hyper.lr`
    (the scheduled rate).
    """
    rate = hyper.lr if lr is None else lr
    for name, grad in grads.items():
        param = tensor_at(params, name)
        if grad.shape != param.shape:
            raise ShapeMismatchError(f"gradient {grad.shape} does not match {name} {param.shape}")
        p = param.numpy()
        decay = 0.0 if is_batchnorm_param(name) else hyper.weight_decay
        step = grad.numpy() + decay * p
        previous = state.velocity.get(name)
        velocity = step if previous is None else hyper.momentum * previous + step
        state.velocity[name] = velocity
        assign_tensor(params, name, Tensor((p - rate * velocity).astype(p.dtype)))
    state.steps += 1


# Training


def build_toy_model(
    block_kind: BlockKind | str,
    expansion: float,
    seed: int = 0,
    classes: int = 4,
    dtype: DType = DType.F32,
) -> Model:
    kind = BlockKind(block_kind)
    if kind not in TOY_BLOCK_KINDS:
        allowed = ", ".join(option.value for option in TOY_BLOCK_KINDS)
        error_msg = f"toy training supports {allowed}, got {kind.value}"
        logger.error(error_msg)
        raise InvalidConfigError(error_msg, "block")
    return build_backbone(ModelCfg.toy_classifier(kind, expansion, classes, dtype=dtype), seed)


def compute_gradients(
    model: Model, images: Tensor, labels: Labels
) -> tuple[float, dict[str, Tensor]]:
    """Mean cross-entropy of a training-mode forward and its gradient per trainable tensor."""
    named = list(model.named_tensors(trainable_only=True))
    tensors = [tensor for _, tensor in named]
    with GradTape() as tape:
        tape.watch(*tensors)
        logits = model.classify(images, training=True)
    loss, grad_logits = softmax_cross_entropy(logits, labels)
    grads = tape.gradient(logits, tensors, grad_target=grad_logits)
    return loss, {name: grad for (name, _), grad in zip(named, grads, strict=True)}


def evaluate(model: Model, dataset: ToyDataset) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) in inference mode over the whole dataset."""
    total_loss = 0.0
    correct = 0
    with no_tape():
        for start in range(0, dataset.n, EVAL_BATCH):
            indices = np.arange(start, min(start + EVAL_BATCH, dataset.n))
            images, labels = dataset.batch(indices)
            logits = model.classify(images)
            loss, _ = softmax_cross_entropy(logits, labels)
            total_loss += loss * len(indices)
            correct += int((logits.numpy().argmax(axis=1) == labels).sum())
    return total_loss / dataset.n, correct / dataset.n


def fit(
    model: Model,
    dataset: ToyDataset,
    steps: int,
    hyper: SgdHyper,
    seed: int = 0,
    batch_size: int = 32,
    log_every: int = 50,
) -> list[float]:
    """Run `steps` SGD steps on shuffled minibatches; returns the per-step losses.

    Raises:
        DivergedLossError: The loss became NaN or infinite

    """
    rng = np.random.default_rng(seed)
    batch = min(batch_size, dataset.n)
    state = SgdState()
    order = rng.permutation(dataset.n)
    cursor = 0
    curve: list[float] = []
    for step in range(steps):
        if cursor + batch > dataset.n:
            order = rng.permutation(dataset.n)
            cursor = 0
        images, labels = dataset.batch(order[cursor : cursor + batch])
        cursor += batch
        loss, grads = compute_gradients(model, images, labels)
        if not math.isfinite(loss):
            error_msg = f"loss diverged to {loss} at step {step}"
            logger.error(error_msg)
            raise DivergedLossError(error_msg)
        sgd_update(model.params, grads, hyper, state, lr=hyper.lr_at(step, steps))
        curve.append(loss)
        if log_every and (step + 1) % log_every == 0:
            window = curve[-log_every:]
            logger.info(f"Step {step + 1}/{steps}: mean loss {sum(window) / len(window):.4f}")
    return curve


def train_toy_model(
    block_kind: BlockKind | str,
    expansion: float,
    steps: int,
    seed: int = 0,
    *,
    classes: int | None = None,
    samples: int | None = None,
    batch_size: int | None = None,
    hyper: SgdHyper | None = None,
    tracker: MetricsTracker | None = None,
) -> tuple[Model, TrainResult]:
    """Train a toy classifier and return it together with its result summary."""
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    classes = classes or settings.toy_classes
    hyper = hyper or SgdHyper(lr=settings.toy_learning_rate)
    dataset = gen_synthetic(seed, samples or settings.toy_samples, classes)
    model = build_toy_model(block_kind, expansion, seed, classes)
    initial_loss, _ = evaluate(model, dataset)
    logger.info(
        f"Training {model.cfg.name} e={expansion} for {steps} steps "
        f"(seed {seed}, initial loss {initial_loss:.4f})"
    )
    curve = fit(model, dataset, steps, hyper, seed, batch_size or settings.toy_batch_size)
    _, accuracy = evaluate(model, dataset)
    tail = curve[-FINAL_LOSS_WINDOW:]
    cost = count_macs_params(model.cfg, (IMAGE_SIZE, IMAGE_SIZE))
    result = TrainResult(
        block_kind=BlockKind(block_kind).value,
        expansion=expansion,
        seed=seed,
        steps=steps,
        initial_loss=initial_loss,
        loss_curve=curve,
        final_loss=sum(tail) / len(tail) if tail else initial_loss,
        final_train_acc=accuracy,
        macs_per_sample=cost.macs,
        params=cost.params,
    )
    logger.info(
        f"Finished {model.cfg.name}: final loss {result.final_loss:.4f}, "
        f"train accuracy {accuracy:.3f}"
    )
    _track(tracker or metrics_tracker(), result, hyper)
    return model, result


def train_toy(
    block_kind: BlockKind | str,
    expansion: float,
    steps: int,
    seed: int = 0,
    **options: Any,
) -> TrainResult:
    """Loss curve and final train accuracy of one seeded toy run."""
    _, result = train_toy_model(block_kind, expansion, steps, seed, **options)
    return result


def _track(tracker: MetricsTracker, result: TrainResult, hyper: SgdHyper) -> None:
    run_name = f"train-toy-{result.block_kind}-e{result.expansion:g}-s{result.seed}"
    with tracker.start_run(run_name=run_name):
        tracker.log_params(
            {
                "block_kind": result.block_kind,
                "expansion": result.expansion,
                "steps": result.steps,
                "seed": result.seed,
                **hyper.model_dump(),
            }
        )
        tracker.log_curve("loss", result.loss_curve)
        tracker.log_metrics(
            {
                "initial_loss": result.initial_loss,
                "final_loss": result.final_loss,
                "final_train_acc": result.final_train_acc,
                "macs_per_sample": float(result.macs_per_sample),
            }
        )


def linear_probe(dataset: ToyDataset, steps: int = 200, lr: float = 0.5, seed: int = 0) -> float:
    """Train accuracy of full-batch softmax regression on raw pixels."""
    rng = np.random.default_rng(seed)
    x = Tensor(dataset.images.numpy().reshape(dataset.n, -1))
    dtype = x.numpy().dtype
    w = Tensor(rng.normal(0.0, 0.01, (dataset.classes, x.shape[1])).astype(dtype))
    b = Tensor(np.zeros(dataset.classes, dtype=dtype))
    for _ in range(steps):
        with GradTape() as tape:
            tape.watch(w, b)
            logits = linear(x, w, b)
        _, grad_logits = softmax_cross_entropy(logits, dataset.labels)
        grad_w, grad_b = tape.gradient(logits, [w, b], grad_target=grad_logits)
        w = Tensor(w.numpy() - lr * grad_w.numpy())
        b = Tensor(b.numpy() - lr * grad_b.numpy())
    with no_tape():
        predictions = linear(x, w, b).numpy().argmax(axis=1)
    accuracy = float((predictions == dataset.labels).mean())
    logger.info(f"Linear probe on {dataset.n} samples: train accuracy {accuracy:.3f}")
    return accuracy
