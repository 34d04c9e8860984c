"""RemDet building blocks, their parameters, initialization and backbone composition.

Every forward takes ``training``: when set, batch norms normalize by batch
statistics and update their running statistics in place; otherwise they use
the running statistics.
"""

import math
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Any, TypeAlias

import numpy as np

from networks.remdet.src.errors import (
    InvalidConfigError,
    InvalidInputExtentError,
    ModeMismatchError,
    OddSpatialExtentError,
    ShapeMismatchError,
    WidthMismatchError,
)
from networks.remdet.src.ops import (
    activation,
    batchnorm_infer,
    batchnorm_train,
    concat_channels,
    conv2d,
    ew_add,
    ew_mul,
    global_avg_pool,
    linear,
    patch_merge,
    split_channels,
    zero_pad,
)
from networks.remdet.src.tensor import BatchNormParams, Tensor, to_numpy_dtype
from shared.models import (
    Activation,
    BlockCfg,
    BlockKind,
    BottleneckCfg,
    C2fCfg,
    CEDCfg,
    ConvFFNCfg,
    ConvModuleCfg,
    ConvSpec,
    DType,
    GatedFFNCfg,
    GateMerge,
    ModelCfg,
    MultiplicationCfg,
    NormCfg,
    RepDWCfg,
    RepMode,
    StageCfg,
    StemCfg,
)
from shared.monitoring import get_logger

logger = get_logger(__name__)


# Parameters


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None = None


@dataclass
class ConvModuleParams:
    conv: ConvParams
    bn: BatchNormParams | None = None


@dataclass
class FusedDWConv:
    """Deploy-time depthwise 3x3 kernel [C,1,3,3] plus bias [C]; stride 1, pad 1."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        channels = self.weight.shape[0]
        if self.weight.shape != (channels, 1, 3, 3) or self.bias.shape != (channels,):
            raise ShapeMismatchError(
                f"fused depthwise conv needs weight [C,1,3,3] and bias [C], "
                f"got {self.weight.shape} and {self.bias.shape}"
            )

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @property
    def spec(self) -> ConvSpec:
        return ConvSpec.depthwise(self.channels)


@dataclass
class RepDWParams:
    """Train mode holds dw3 and dw1; deploy mode holds only `fused`."""

    dw3: ConvModuleParams | None = None
    dw1: ConvModuleParams | None = None
    fused: FusedDWConv | None = None


@dataclass
class ConvFFNParams:
    cv1: ConvModuleParams
    cv2: ConvModuleParams


@dataclass
class MultiplicationParams:
    cv1: ConvModuleParams
    cv2: ConvModuleParams


@dataclass
class GatedFFNParams:
    cv1: ConvModuleParams
    repdw: RepDWParams
    cv2: ConvModuleParams


@dataclass
class CEDParams:
    expand: ConvModuleParams
    dw: ConvModuleParams
    compress: ConvModuleParams


@dataclass
class BottleneckParams:
    cv1: ConvModuleParams
    cv2: ConvModuleParams


@dataclass
class C2fParams:
    cv1: ConvModuleParams
    bottlenecks: list[BottleneckParams]
    cv2: ConvModuleParams


BlockParams: TypeAlias = (
    ConvModuleParams
    | ConvFFNParams
    | MultiplicationParams
    | RepDWParams
    | GatedFFNParams
    | CEDParams
    | BottleneckParams
    | C2fParams
)


@dataclass
class HeadParams:
    weight: Tensor
    bias: Tensor


@dataclass
class StageParams:
    downsample: CEDParams | None
    blocks: list[BlockParams] = field(default_factory=list)


@dataclass
class ModelParams:
    stem: ConvModuleParams
    stages: list[StageParams]
    head: HeadParams | None = None


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def named_tensors(
    tree: Any, prefix: str = "", *, trainable_only: bool = False
) -> Iterator[tuple[str, Tensor]]:
    """Walk a parameter tree depth-first, yielding (dotted name, tensor).

    Running batch-norm statistics are skipped when `trainable_only` is set.
    """
    if isinstance(tree, Tensor):
        yield prefix, tree
    elif isinstance(tree, list):
        for index, item in enumerate(tree):
            yield from named_tensors(item, _join(prefix, str(index)), trainable_only=trainable_only)
    elif is_dataclass(tree) and not isinstance(tree, type):
        for spec in fields(tree):
            if trainable_only and not spec.metadata.get("trainable", True):
                continue
            value = getattr(tree, spec.name)
            if value is None or isinstance(value, (int, float)):
                continue
            yield from named_tensors(value, _join(prefix, spec.name), trainable_only=trainable_only)


def tensor_at(tree: Any, name: str) -> Tensor:
    """The tensor at a dotted path of a parameter tree."""
    node = tree
    for part in name.split("."):
        node = node[int(part)] if isinstance(node, list) else getattr(node, part)
    if not isinstance(node, Tensor):
        raise ShapeMismatchError(f"{name} does not name a tensor")
    return node


def assign_tensor(tree: Any, name: str, tensor: Tensor) -> None:
    """Replace the tensor at a dotted path of a parameter tree."""
    *parents, leaf = name.split(".")
    node = tree
    for part in parents:
        node = node[int(part)] if isinstance(node, list) else getattr(node, part)
    if isinstance(node, list):
        node[int(leaf)] = tensor
    else:
        setattr(node, leaf, tensor)


def map_tensors(tree: Any, fn: Callable[[Tensor], Tensor]) -> Any:
    """Structural copy of a parameter tree with `fn` applied to every tensor."""
    if isinstance(tree, Tensor):
        return fn(tree)
    if isinstance(tree, list):
        return [map_tensors(item, fn) for item in tree]
    if is_dataclass(tree) and not isinstance(tree, type):
        updates = {
            spec.name: map_tensors(getattr(tree, spec.name), fn)
            for spec in fields(tree)
            if getattr(tree, spec.name) is not None
            and not isinstance(getattr(tree, spec.name), (int, float))
        }
        return replace(tree, **updates)
    return tree


def parameter_count(tree: Any) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    return sum(tensor.size for _, tensor in named_tensors(tree, trainable_only=True))


# Layer derivation shared by forward, init and cost analysis


def _pw(c_in: int, c_out: int, act: Activation = Activation.SILU) -> ConvModuleCfg:
    return ConvModuleCfg(spec=ConvSpec.pointwise(c_in, c_out), act=act)


def convffn_layers(cfg: ConvFFNCfg) -> tuple[ConvModuleCfg, ConvModuleCfg]:
    return _pw(cfg.c1, cfg.hidden), _pw(cfg.hidden, cfg.c2, Activation.NONE)


def multiplication_layers(cfg: MultiplicationCfg) -> tuple[ConvModuleCfg, ConvModuleCfg]:
    return _pw(cfg.c1, 2 * cfg.half_hidden), _pw(cfg.cv2_in, cfg.c2, Activation.NONE)


def repdw_layers(cfg: RepDWCfg) -> tuple[ConvModuleCfg, ConvModuleCfg]:
    """The 3x3 (pad 1) and 1x1 (pad 0) depthwise branches, each with its own BN."""
    channels = cfg.channels
    dw3 = ConvModuleCfg(spec=ConvSpec.depthwise(channels, 3), act=Activation.NONE)
    dw1 = ConvModuleCfg(spec=ConvSpec.depthwise(channels, 1), act=Activation.NONE)
    return dw3, dw1


def gatedffn_layers(cfg: GatedFFNCfg) -> tuple[ConvModuleCfg, ConvModuleCfg]:
    return _pw(cfg.c1, 2 * cfg.half_hidden), _pw(cfg.half_hidden, cfg.c2, Activation.NONE)


def ced_layers(cfg: CEDCfg) -> tuple[ConvModuleCfg, ConvModuleCfg, ConvModuleCfg]:
    expand = _pw(cfg.c_in, cfg.expanded)
    dw = ConvModuleCfg(spec=ConvSpec.depthwise(cfg.expanded, 3))
    compress = _pw(cfg.merged, cfg.c_out)
    return expand, dw, compress


def bottleneck_layers(cfg: BottleneckCfg) -> tuple[ConvModuleCfg, ConvModuleCfg]:
    cv1 = ConvModuleCfg(spec=ConvSpec.square(cfg.h, cfg.hidden, 3))
    cv2 = ConvModuleCfg(spec=ConvSpec.square(cfg.hidden, cfg.h, 3))
    return cv1, cv2


def c2f_layers(cfg: C2fCfg) -> tuple[ConvModuleCfg, ConvModuleCfg]:
    return _pw(cfg.c1, 2 * cfg.hidden), _pw(cfg.concat_width, cfg.c2)


def stem_padding(stem: StemCfg) -> tuple[int, int]:
    """Leading/trailing zero padding that makes the stem output exactly H/stride.

    The leading side gets kernel//2 and the trailing side whatever remains, so a
    3x3 stride-2 stem sees one leading zero row and column and none trailing.
    """
    total = max(stem.kernel - stem.stride, 0)
    leading = min(stem.kernel // 2, total)
    return leading, total - leading


def stem_layer(cfg: ModelCfg) -> ConvModuleCfg:
    spec = ConvSpec(
        in_channels=cfg.in_channels,
        out_channels=cfg.stem.width,
        kernel_h=cfg.stem.kernel,
        kernel_w=cfg.stem.kernel,
        stride=cfg.stem.stride,
    )
    return ConvModuleCfg(spec=spec)


def block_io(cfg: BlockCfg) -> tuple[int, int]:
    """(input channels, output channels) of a block."""
    match cfg:
        case ConvModuleCfg():
            return cfg.spec.in_channels, cfg.spec.out_channels
        case RepDWCfg():
            return cfg.channels, cfg.channels
        case CEDCfg():
            return cfg.c_in, cfg.c_out
        case BottleneckCfg():
            return cfg.h, cfg.h
        case ConvFFNCfg() | MultiplicationCfg() | GatedFFNCfg() | C2fCfg():
            return cfg.c1, cfg.c2
    raise InvalidConfigError(f"unsupported block {type(cfg).__name__}")


def with_mode(cfg: BlockCfg, mode: RepMode) -> BlockCfg:
    if isinstance(cfg, (GatedFFNCfg, RepDWCfg)) and cfg.mode is not mode:
        return cfg.model_copy(update={"mode": mode})
    return cfg


def default_block(kind: BlockKind, width: int, expansion: float, mode: RepMode) -> BlockCfg:
    """The block a stage is populated with when it lists no explicit blocks.

    C2f kinds ignore `expansion`; they use their own (e_overall, e_bottleneck) pair.
    """
    match kind:
        case BlockKind.CONVFFN:
            return ConvFFNCfg(c1=width, c2=width, e=expansion)
        case BlockKind.MULT:
            return MultiplicationCfg(c1=width, c2=width, e=expansion)
        case BlockKind.GATEDFFN:
            return GatedFFNCfg(c1=width, c2=width, e=expansion, mode=mode)
        case BlockKind.C2F:
            return C2fCfg(c1=width, c2=width, n=1)
        case BlockKind.CHANNEL_C2F:
            return C2fCfg.channel_c2f(width, width, n=1)
    raise InvalidConfigError(f"unknown block kind {kind}")


def _preserves_extent(cfg: BlockCfg) -> bool:
    if isinstance(cfg, CEDCfg):
        return False
    if isinstance(cfg, ConvModuleCfg):
        spec = cfg.spec
        return spec.stride == 1 and spec.kernel_h == spec.kernel_w == 2 * spec.padding + 1
    return True


@dataclass(frozen=True)
class StagePlan:
    """Resolved stage: optional CED downsample and the concrete block configs."""

    downsample: CEDCfg | None
    blocks: list[BlockCfg]


def resolve_stages(cfg: ModelCfg) -> list[StagePlan]:
    """Expand stage descriptors into concrete blocks and check that widths chain.

    Raises:
        WidthMismatchError: A block or head does not consume the incoming width
        InvalidConfigError: An explicit block would change the spatial extent

    """
    plans = []
    width = cfg.stem.width
    for index, stage in enumerate(cfg.stages):
        path = f"stages.{index}"
        downsample = None
        if stage.downsample == "ced":
            downsample = CEDCfg(c_in=width, c_out=stage.width, t=stage.ced_t)
            width = stage.width
        blocks = _stage_blocks(stage, width, cfg.mode, path)
        for position, block in enumerate(blocks):
            block_path = f"{path}.blocks.{position}"
            if not _preserves_extent(block):
                raise InvalidConfigError(
                    "stage blocks must preserve the spatial extent", block_path
                )
            c_in, c_out = block_io(block)
            if c_in != width:
                raise WidthMismatchError(
                    f"block consumes {c_in} channels but receives {width}", block_path
                )
            width = c_out
        if width != stage.width:
            raise WidthMismatchError(
                f"stage produces {width} channels but declares width {stage.width}", path
            )
        plans.append(StagePlan(downsample=downsample, blocks=blocks))
    head = cfg.head
    if head.kind == "classifier" and head.in_features not in (None, width):
        raise WidthMismatchError(
            f"head expects {head.in_features} features but the backbone emits {width}",
            "head.in_features",
        )
    return plans


def _stage_blocks(stage: StageCfg, width: int, mode: RepMode, path: str) -> list[BlockCfg]:
    if stage.blocks is not None:
        return [with_mode(block, mode) for block in stage.blocks]
    if stage.block_count and width != stage.width:
        raise WidthMismatchError(
            f"stage without downsampling receives {width} channels "
            f"but declares width {stage.width}",
            f"{path}.width",
        )
    return [default_block(stage.block_kind, stage.width, stage.expansion, mode)] * stage.block_count


# Initialization


def _uniform(
    rng: np.random.Generator, bound: float, shape: tuple[int, ...], dtype: DType
) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, shape).astype(to_numpy_dtype(dtype)))


def init_conv_module(
    cfg: ConvModuleCfg, rng: np.random.Generator, dtype: DType, norm: NormCfg
) -> ConvModuleParams:
    """Kaiming-uniform fan-in weights (bound 1/sqrt(fan_in)); BN gamma=1, beta=0."""
    spec = cfg.spec
    bound = 1.0 / math.sqrt(spec.fan_in)
    weight = _uniform(rng, bound, spec.weight_shape, dtype)
    bias = _uniform(rng, bound, (spec.out_channels,), dtype) if cfg.has_bias else None
    bn = BatchNormParams.identity(spec.out_channels, dtype, norm) if cfg.with_bn else None
    return ConvModuleParams(conv=ConvParams(weight=weight, bias=bias), bn=bn)


def init_repdw(cfg: RepDWCfg, rng: np.random.Generator, dtype: DType, norm: NormCfg) -> RepDWParams:
    if cfg.mode is RepMode.DEPLOY:
        spec = ConvSpec.depthwise(cfg.channels)
        bound = 1.0 / math.sqrt(spec.fan_in)
        return RepDWParams(
            fused=FusedDWConv(
                weight=_uniform(rng, bound, spec.weight_shape, dtype),
                bias=_uniform(rng, bound, (cfg.channels,), dtype),
            )
        )
    dw3, dw1 = repdw_layers(cfg)
    return RepDWParams(
        dw3=init_conv_module(dw3, rng, dtype, norm),
        dw1=init_conv_module(dw1, rng, dtype, norm),
    )


def init_block(
    cfg: BlockCfg, rng: np.random.Generator, dtype: DType, norm: NormCfg
) -> BlockParams:
    """Seeded parameters for any block; draws happen in declaration order."""
    match cfg:
        case ConvModuleCfg():
            return init_conv_module(cfg, rng, dtype, norm)
        case ConvFFNCfg():
            cv1, cv2 = convffn_layers(cfg)
            return ConvFFNParams(
                cv1=init_conv_module(cv1, rng, dtype, norm),
                cv2=init_conv_module(cv2, rng, dtype, norm),
            )
        case MultiplicationCfg():
            cv1, cv2 = multiplication_layers(cfg)
            return MultiplicationParams(
                cv1=init_conv_module(cv1, rng, dtype, norm),
                cv2=init_conv_module(cv2, rng, dtype, norm),
            )
        case RepDWCfg():
            return init_repdw(cfg, rng, dtype, norm)
        case GatedFFNCfg():
            cv1, cv2 = gatedffn_layers(cfg)
            return GatedFFNParams(
                cv1=init_conv_module(cv1, rng, dtype, norm),
                repdw=init_repdw(cfg.repdw, rng, dtype, norm),
                cv2=init_conv_module(cv2, rng, dtype, norm),
            )
        case CEDCfg():
            return init_ced(cfg, rng, dtype, norm)
        case BottleneckCfg():
            return init_bottleneck(cfg, rng, dtype, norm)
        case C2fCfg():
            cv1, cv2 = c2f_layers(cfg)
            first = init_conv_module(cv1, rng, dtype, norm)
            chain = [init_bottleneck(cfg.bottleneck, rng, dtype, norm) for _ in range(cfg.n)]
            last = init_conv_module(cv2, rng, dtype, norm)
            return C2fParams(cv1=first, bottlenecks=chain, cv2=last)
    raise InvalidConfigError(f"unsupported block {type(cfg).__name__}")


def init_ced(cfg: CEDCfg, rng: np.random.Generator, dtype: DType, norm: NormCfg) -> CEDParams:
    expand, dw, compress = ced_layers(cfg)
    return CEDParams(
        expand=init_conv_module(expand, rng, dtype, norm),
        dw=init_conv_module(dw, rng, dtype, norm),
        compress=init_conv_module(compress, rng, dtype, norm),
    )


def init_bottleneck(
    cfg: BottleneckCfg, rng: np.random.Generator, dtype: DType, norm: NormCfg
) -> BottleneckParams:
    cv1, cv2 = bottleneck_layers(cfg)
    return BottleneckParams(
        cv1=init_conv_module(cv1, rng, dtype, norm),
        cv2=init_conv_module(cv2, rng, dtype, norm),
    )


# Forward


def _channels(x: Tensor, expected: int, block: str) -> None:
    if x.ndim != 4 or x.shape[1] != expected:
        raise ShapeMismatchError(f"{block} expects [N, {expected}, H, W], got {x.shape}")


def _norm(x: Tensor, bn: BatchNormParams, *, training: bool) -> Tensor:
    return batchnorm_train(x, bn) if training else batchnorm_infer(x, bn)


def conv_module_forward(
    x: Tensor, cfg: ConvModuleCfg, params: ConvModuleParams, *, training: bool = False
) -> Tensor:
    """act(bn(conv(x))), with BN and activation optional per cfg."""
    y = conv2d(x, params.conv.weight, params.conv.bias, cfg.spec)
    if cfg.with_bn:
        if params.bn is None:
            raise ShapeMismatchError("ConvModule with batch norm is missing its BN parameters")
        y = _norm(y, params.bn, training=training)
    return activation(y, cfg.act)


def convffn_forward(
    x: Tensor, cfg: ConvFFNCfg, params: ConvFFNParams, *, training: bool = False
) -> Tensor:
    _channels(x, cfg.c1, "ConvFFN")
    cv1, cv2 = convffn_layers(cfg)
    y = conv_module_forward(x, cv1, params.cv1, training=training)
    y = conv_module_forward(y, cv2, params.cv2, training=training)
    return ew_add(y, x) if cfg.residual else y


def multiplication_forward(
    x: Tensor, cfg: MultiplicationCfg, params: MultiplicationParams, *, training: bool = False
) -> Tensor:
    """cv2(GELU(y) * GELU(z)) for (y, z) = split(cv1(x)), optionally retaining the gate."""
    _channels(x, cfg.c1, "Multiplication")
    cv1, cv2 = multiplication_layers(cfg)
    c = cfg.half_hidden
    value, gate = split_channels(conv_module_forward(x, cv1, params.cv1, training=training), (c, c))
    gate = activation(gate, Activation.GELU)
    merged = ew_mul(activation(value, Activation.GELU), gate)
    if cfg.retain_gate:
        if cfg.gate_merge is GateMerge.CONCAT:
            merged = concat_channels([merged, gate])
        else:
            merged = ew_add(merged, gate)
    y = conv_module_forward(merged, cv2, params.cv2, training=training)
    return ew_add(y, x) if cfg.residual else y


def rep_dw_forward(
    x: Tensor, cfg: RepDWCfg, params: RepDWParams, *, training: bool = False
) -> Tensor:
    """Train: BN(dw3x3(x)) + BN(dw1x1(x)). Deploy: fused dw3x3(x) + bias.

    Raises:
        ModeMismatchError: Parameters for the configured mode are absent

    """
    _channels(x, cfg.channels, "RepDW")
    if cfg.mode is RepMode.DEPLOY:
        if params.fused is None:
            raise ModeMismatchError("deploy-mode RepDW has no fused kernel")
        return conv2d(x, params.fused.weight, params.fused.bias, params.fused.spec)
    if params.dw3 is None or params.dw1 is None:
        raise ModeMismatchError("train-mode RepDW needs both depthwise branches")
    dw3, dw1 = repdw_layers(cfg)
    return ew_add(
        conv_module_forward(x, dw3, params.dw3, training=training),
        conv_module_forward(x, dw1, params.dw1, training=training),
    )


def gatedffn_forward(
    x: Tensor, cfg: GatedFFNCfg, params: GatedFFNParams, *, training: bool = False
) -> Tensor:
    """cv2(GELU(RepDW(a)) * GELU(g)) for (a, g) = split(cv1(x)); residual when widths match."""
    _channels(x, cfg.c1, "GatedFFN")
    cv1, cv2 = gatedffn_layers(cfg)
    h = cfg.half_hidden
    value, gate = split_channels(conv_module_forward(x, cv1, params.cv1, training=training), (h, h))
    value = rep_dw_forward(value, cfg.repdw, params.repdw, training=training)
    product = ew_mul(activation(value, Activation.GELU), activation(gate, Activation.GELU))
    y = conv_module_forward(product, cv2, params.cv2, training=training)
    return ew_add(y, x) if cfg.residual else y


def ced_forward(x: Tensor, cfg: CEDCfg, params: CEDParams, *, training: bool = False) -> Tensor:
    """pw expand -> dw3x3 stride 1 -> patch merge -> pw compress; halves H and W."""
    _channels(x, cfg.c_in, "CED")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise OddSpatialExtentError(f"CED needs even H and W, got {x.shape[2]}x{x.shape[3]}")
    expand, dw, compress = ced_layers(cfg)
    y = conv_module_forward(x, expand, params.expand, training=training)
    y = conv_module_forward(y, dw, params.dw, training=training)
    y = patch_merge(y)
    return conv_module_forward(y, compress, params.compress, training=training)


def bottleneck_forward(
    x: Tensor, cfg: BottleneckCfg, params: BottleneckParams, *, training: bool = False
) -> Tensor:
    _channels(x, cfg.h, "Bottleneck")
    cv1, cv2 = bottleneck_layers(cfg)
    y = conv_module_forward(x, cv1, params.cv1, training=training)
    y = conv_module_forward(y, cv2, params.cv2, training=training)
    return ew_add(y, x) if cfg.shortcut else y


def c2f_forward(x: Tensor, cfg: C2fCfg, params: C2fParams, *, training: bool = False) -> Tensor:
    """Split cv1(x) in halves, chain bottlenecks on the second, concat everything, cv2."""
    _channels(x, cfg.c1, "C2f")
    if len(params.bottlenecks) != cfg.n:
        raise ShapeMismatchError(f"C2f expects {cfg.n} bottlenecks, got {len(params.bottlenecks)}")
    cv1, cv2 = c2f_layers(cfg)
    h = cfg.hidden
    outputs = split_channels(conv_module_forward(x, cv1, params.cv1, training=training), (h, h))
    current = outputs[-1]
    for bottleneck in params.bottlenecks:
        current = bottleneck_forward(current, cfg.bottleneck, bottleneck, training=training)
        outputs.append(current)
    return conv_module_forward(concat_channels(outputs), cv2, params.cv2, training=training)


def block_forward(
    x: Tensor, cfg: BlockCfg, params: BlockParams, *, training: bool = False
) -> Tensor:
    """Dispatch on the block kind."""
    match cfg, params:
        case ConvModuleCfg(), ConvModuleParams():
            return conv_module_forward(x, cfg, params, training=training)
        case ConvFFNCfg(), ConvFFNParams():
            return convffn_forward(x, cfg, params, training=training)
        case MultiplicationCfg(), MultiplicationParams():
            return multiplication_forward(x, cfg, params, training=training)
        case RepDWCfg(), RepDWParams():
            return rep_dw_forward(x, cfg, params, training=training)
        case GatedFFNCfg(), GatedFFNParams():
            return gatedffn_forward(x, cfg, params, training=training)
        case CEDCfg(), CEDParams():
            return ced_forward(x, cfg, params, training=training)
        case BottleneckCfg(), BottleneckParams():
            return bottleneck_forward(x, cfg, params, training=training)
        case C2fCfg(), C2fParams():
            return c2f_forward(x, cfg, params, training=training)
    raise ShapeMismatchError(
        f"parameters {type(params).__name__} do not match block {type(cfg).__name__}"
    )


# Models


@dataclass
class BlockModule:
    """A single block with its parameters, for isolated tests, fusion and gradchecks."""

    cfg: BlockCfg
    params: BlockParams
    dtype: DType = DType.F32
    norm: NormCfg = field(default_factory=NormCfg)

    def forward(self, x: Tensor, *, training: bool = False) -> Tensor:
        return block_forward(x, self.cfg, self.params, training=training)

    def named_tensors(self, *, trainable_only: bool = False) -> Iterator[tuple[str, Tensor]]:
        return named_tensors(self.params, trainable_only=trainable_only)

    def parameter_count(self) -> int:
        return parameter_count(self.params)


def build_block(
    cfg: BlockCfg,
    seed: int = 0,
    *,
    dtype: DType = DType.F32,
    norm: NormCfg | None = None,
) -> BlockModule:
    norm = norm or NormCfg()
    params = init_block(cfg, np.random.default_rng(seed), dtype, norm)
    return BlockModule(cfg=cfg, params=params, dtype=dtype, norm=norm)


@dataclass
class Model:
    """Backbone (plus optional classifier head) with its resolved stage plans."""

    cfg: ModelCfg
    params: ModelParams
    plans: list[StagePlan]

    @property
    def dtype(self) -> DType:
        return self.cfg.dtype

    def features(self, x: Tensor, *, training: bool = False) -> list[Tensor]:
        return backbone_forward(self, x, training=training)

    def classify(self, x: Tensor, *, training: bool = False) -> Tensor:
        """Logits [N, classes] from the pooled last-stage feature."""
        head = self.params.head
        if head is None:
            raise ModeMismatchError(f"model {self.cfg.name} has no classifier head")
        pooled = global_avg_pool(self.features(x, training=training)[-1])
        return linear(pooled, head.weight, head.bias)

    def named_tensors(self, *, trainable_only: bool = False) -> Iterator[tuple[str, Tensor]]:
        return named_tensors(self.params, trainable_only=trainable_only)

    def parameter_count(self) -> int:
        return parameter_count(self.params)


def init_model_params(cfg: ModelCfg, plans: list[StagePlan], seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    dtype, norm = cfg.dtype, cfg.norm
    stem = init_conv_module(stem_layer(cfg), rng, dtype, norm)
    stages = []
    for plan in plans:
        downsample = None
        if plan.downsample is not None:
            downsample = init_ced(plan.downsample, rng, dtype, norm)
        blocks = [init_block(block, rng, dtype, norm) for block in plan.blocks]
        stages.append(StageParams(downsample=downsample, blocks=blocks))
    head = None
    if cfg.head.kind == "classifier":
        features = cfg.out_channels
        bound = 1.0 / math.sqrt(features)
        head = HeadParams(
            weight=_uniform(rng, bound, (cfg.head.classes, features), dtype),
            bias=_uniform(rng, bound, (cfg.head.classes,), dtype),
        )
    return ModelParams(stem=stem, stages=stages, head=head)


def build_backbone(cfg: ModelCfg, seed: int = 0) -> Model:
    """Validate `cfg` and build a seeded model.

    Raises:
        WidthMismatchError: Stage or block widths do not chain

    """
    plans = resolve_stages(cfg)
    params = init_model_params(cfg, plans, seed)
    model = Model(cfg=cfg, params=params, plans=plans)
    logger.info(
        f"Built {cfg.name}: stages={list(cfg.block_counts)} params={model.parameter_count()} "
        f"mode={cfg.mode.value} dtype={cfg.dtype.value}"
    )
    return model


def backbone_forward(model: Model, x: Tensor, *, training: bool = False) -> list[Tensor]:
    """Per-stage features at the cumulative stage strides.

    Raises:
        InvalidInputExtentError: H or W not divisible by the total stride

    """
    cfg = model.cfg
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeMismatchError(f"{cfg.name} expects [N, {cfg.in_channels}, H, W], got {x.shape}")
    stride = cfg.total_stride
    if x.shape[2] % stride or x.shape[3] % stride:
        raise InvalidInputExtentError(
            f"input {x.shape[2]}x{x.shape[3]} is not divisible by the total stride {stride}"
        )
    leading, trailing = stem_padding(cfg.stem)
    y = zero_pad(x, leading, trailing, leading, trailing)
    y = conv_module_forward(y, stem_layer(cfg), model.params.stem, training=training)
    features = []
    for plan, stage in zip(model.plans, model.params.stages, strict=True):
        if plan.downsample is not None:
            if stage.downsample is None:
                raise ShapeMismatchError("stage with a CED downsample is missing its parameters")
            y = ced_forward(y, plan.downsample, stage.downsample, training=training)
        for block_cfg, block_params in zip(plan.blocks, stage.blocks, strict=True):
            y = block_forward(y, block_cfg, block_params, training=training)
        features.append(y)
    return features
