"""Deploy-time structural reparameterization of depthwise branch pairs.

All fusion arithmetic runs in f64 and is cast back to the model dtype at the end.
"""

from typing import TypeVar

import numpy as np

from networks.remdet.src.analysis import count_macs_params
from networks.remdet.src.blocks import (
    BlockModule,
    BlockParams,
    ConvModuleParams,
    FusedDWConv,
    GatedFFNParams,
    Model,
    RepDWParams,
    block_io,
    map_tensors,
    resolve_stages,
    with_mode,
)
from networks.remdet.src.errors import AlreadyFusedError, ModeMismatchError, ShapeMismatchError
from networks.remdet.src.tensor import BatchNormParams, Tensor, to_numpy_dtype
from shared.models import DType, FusionReport, GatedFFNCfg, RepDWCfg, RepMode
from shared.monitoring import get_logger

logger = get_logger(__name__)

Fusable = TypeVar("Fusable", Model, BlockModule)

VERIFY_INPUT_SCALE = 2.0
VERIFY_CHUNK = 10


def fold_bn(w: Tensor, b: Tensor | None, bn: BatchNormParams) -> tuple[Tensor, Tensor]:
    """Absorb batch norm into the preceding convolution.

    With s_k = gamma_k/sqrt(var_k + eps): w'_k = w_k*s_k and b'_k = beta_k + (b_k - mean_k)*s_k.
    """
    out_channels = w.shape[0]
    if bn.channels != out_channels:
        raise ShapeMismatchError(
            f"batch norm over {bn.channels} channels cannot fold into {out_channels} filters"
        )
    if b is not None and b.shape != (out_channels,):
        raise ShapeMismatchError(f"bias {b.shape} does not match {out_channels} filters")
    gamma = bn.gamma.numpy().astype(np.float64)
    scale = gamma / np.sqrt(bn.running_var.numpy().astype(np.float64) + bn.eps)
    bias = b.numpy().astype(np.float64) if b is not None else np.zeros(out_channels)
    weight = w.numpy().astype(np.float64) * scale.reshape((-1,) + (1,) * (w.ndim - 1))
    folded_bias = bn.beta.numpy().astype(np.float64) + (
        bias - bn.running_mean.numpy().astype(np.float64)
    ) * scale
    target = to_numpy_dtype(w.dtype)
    return Tensor(weight.astype(target)), Tensor(folded_bias.astype(target))


def embed_dw1x1_into_3x3(w1: Tensor, b1: Tensor | None) -> tuple[Tensor, Tensor | None]:
    """Zero-pad a depthwise 1x1 kernel to 3x3 with the value at the centre tap."""
    if w1.ndim != 4 or w1.shape[1:] != (1, 1, 1):
        raise ShapeMismatchError(f"expected a depthwise 1x1 kernel [C,1,1,1], got {w1.shape}")
    kernel = np.zeros((w1.shape[0], 1, 3, 3), dtype=w1.numpy().dtype)
    kernel[:, :, 1, 1] = w1.numpy()[:, :, 0, 0]
    return Tensor(kernel), b1


def _fold_branch(branch: ConvModuleParams | None, name: str) -> tuple[Tensor, Tensor, DType]:
    if branch is None:
        raise ModeMismatchError(f"RepDW {name} branch is missing; is the block already fused?")
    if branch.bn is None:
        raise ShapeMismatchError(f"RepDW {name} branch carries no batch norm")
    bias = branch.conv.bias.astype(DType.F64) if branch.conv.bias is not None else None
    weight, folded_bias = fold_bn(
        branch.conv.weight.astype(DType.F64), bias, branch.bn.astype(DType.F64)
    )
    return weight, folded_bias, branch.conv.weight.dtype


def fuse_repdw(train_params: RepDWParams) -> FusedDWConv:
    """Fold both branches, embed the 1x1 kernel and sum into one depthwise 3x3 conv."""
    w3, b3, dtype = _fold_branch(train_params.dw3, "dw3")
    w1, b1, _ = _fold_branch(train_params.dw1, "dw1")
    if w3.shape[1:] != (1, 3, 3) or w1.shape[0] != w3.shape[0]:
        raise ShapeMismatchError(
            f"RepDW branches are not a depthwise 3x3/1x1 pair: {w3.shape} and {w1.shape}"
        )
    w1_embedded, _ = embed_dw1x1_into_3x3(w1, b1)
    target = to_numpy_dtype(dtype)
    weight = w3.numpy() + w1_embedded.numpy()
    bias = b3.numpy() + b1.numpy()
    return FusedDWConv(weight=Tensor(weight.astype(target)), bias=Tensor(bias.astype(target)))


def _fuse_block_params(params: BlockParams) -> tuple[BlockParams, int]:
    if isinstance(params, GatedFFNParams):
        fused = RepDWParams(fused=fuse_repdw(params.repdw))
        return GatedFFNParams(cv1=params.cv1, repdw=fused, cv2=params.cv2), 1
    if isinstance(params, RepDWParams):
        return RepDWParams(fused=fuse_repdw(params)), 1
    return params, 0


def fuse_model(model: Fusable) -> Fusable:
    """Return a deploy-mode copy in which every RepDW pair is a single fused conv.

    The input model is left untouched; all other parameters are carried over.

    Raises:
        AlreadyFusedError: The model (or block) is already in deploy mode

    """
    if isinstance(model, BlockModule):
        return _fuse_block_module(model)
    if model.cfg.mode is RepMode.DEPLOY:
        error_msg = f"model {model.cfg.name} is already fused"
        logger.error(error_msg)
        raise AlreadyFusedError(error_msg)
    cfg = model.cfg.model_copy(update={"mode": RepMode.DEPLOY})
    params = map_tensors(model.params, lambda tensor: tensor)
    fused_blocks = 0
    for stage in params.stages:
        for position, block in enumerate(stage.blocks):
            stage.blocks[position], count = _fuse_block_params(block)
            fused_blocks += count
    fused = Model(cfg=cfg, params=params, plans=resolve_stages(cfg))
    logger.info(f"Fused {fused_blocks} RepDW pairs in {cfg.name}")
    return fused


def _fuse_block_module(module: BlockModule) -> BlockModule:
    cfg = module.cfg
    if isinstance(cfg, (GatedFFNCfg, RepDWCfg)) and cfg.mode is RepMode.DEPLOY:
        error_msg = f"{cfg.kind} block is already fused"
        logger.error(error_msg)
        raise AlreadyFusedError(error_msg)
    params = map_tensors(module.params, lambda tensor: tensor)
    fused_params, count = _fuse_block_params(params)
    logger.info(f"Fused {count} RepDW pairs in a {cfg.kind} block")
    return BlockModule(
        cfg=with_mode(cfg, RepMode.DEPLOY),
        params=fused_params,
        dtype=module.dtype,
        norm=module.norm,
    )


def count_fused_blocks(model: Model | BlockModule) -> int:
    if isinstance(model, BlockModule):
        return int(isinstance(model.cfg, (GatedFFNCfg, RepDWCfg)))
    return sum(
        isinstance(block, (GatedFFNCfg, RepDWCfg)) for plan in model.plans for block in plan.blocks
    )


def _input_shape(
    model: Model | BlockModule, input_hw: tuple[int, int] | None
) -> tuple[int, int, int]:
    if isinstance(model, BlockModule):
        height, width = input_hw or (8, 8)
        return (block_io(model.cfg)[0], height, width)
    side = 2 * model.cfg.total_stride
    height, width = input_hw or (side, side)
    return (model.cfg.in_channels, height, width)


def _outputs(model: Model | BlockModule, x: Tensor) -> list[Tensor]:
    if isinstance(model, BlockModule):
        return [model.forward(x)]
    return model.features(x)


def verify_fusion(
    model: Fusable,
    fused: Fusable,
    n_samples: int = 100,
    tol: float = 1e-4,
    seed: int = 0,
    input_hw: tuple[int, int] | None = None,
) -> FusionReport:
    """Compare train-mode and fused outputs on seeded random inputs.

    Inputs are standard normal scaled by 2.0. The report holds the worst absolute
    difference over every stage output (and logit argmax agreement when the
    model has a classifier head) plus the MAC and parameter deltas. A NaN or
    infinity on either side makes the difference infinite, so the check fails.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    channels, height, width = _input_shape(model, input_hw)
    dtype = model.dtype
    rng = np.random.default_rng(seed)
    classify = isinstance(model, Model) and model.params.head is not None
    worst = 0.0
    agree = 0
    for start in range(0, n_samples, VERIFY_CHUNK):
        batch = min(VERIFY_CHUNK, n_samples - start)
        x = Tensor.randn((batch, channels, height, width), rng, dtype, scale=VERIFY_INPUT_SCALE)
        for reference, candidate in zip(_outputs(model, x), _outputs(fused, x), strict=True):
            delta = np.abs(
                reference.numpy().astype(np.float64) - candidate.numpy().astype(np.float64)
            )
            if not np.isfinite(delta).all():
                worst = float("inf")
            else:
                worst = max(worst, float(delta.max()))
        if classify and isinstance(model, Model) and isinstance(fused, Model):
            before = model.classify(x).numpy().argmax(axis=1)
            after = fused.classify(x).numpy().argmax(axis=1)
            agree += int((before == after).sum())

    before_cost = count_macs_params(model.cfg, (height, width))
    after_cost = count_macs_params(fused.cfg, (height, width))
    report = FusionReport(
        max_abs_diff=worst,
        tol=tol,
        n_samples=n_samples,
        passed=worst <= tol,
        dtype=dtype.value,
        fused_blocks=count_fused_blocks(model),
        macs_before=before_cost.macs,
        macs_after=after_cost.macs,
        params_before=before_cost.params,
        params_after=after_cost.params,
        argmax_agreement=agree / n_samples if classify else None,
    )
    logger.info(
        f"Fusion check: max|diff|={worst:.3e} tol={tol:g} passed={report.passed} "
        f"macs {report.macs_before}->{report.macs_after}"
    )
    return report
