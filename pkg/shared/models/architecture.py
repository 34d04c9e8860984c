"""Architecture configuration models: convolution geometry, blocks, stages and models."""

import math
from enum import Enum
from typing import Annotated, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class DType(str, Enum):
    """Compute dtypes supported by the tensor core."""

    F32 = "f32"
    F64 = "f64"


class Activation(str, Enum):
    """Activation functions used inside ConvModules and gates."""

    SILU = "silu"
    GELU = "gelu"
    NONE = "none"


class RepMode(str, Enum):
    """Structural reparameterization mode of depthwise pairs."""

    TRAIN = "train"
    DEPLOY = "deploy"


class GateMerge(str, Enum):
    """How the retained gate is merged with the product before compression."""

    CONCAT = "concat"
    ADD = "add"


class BlockKind(str, Enum):
    """Block kinds a stage can be populated with."""

    CONVFFN = "convffn"
    MULT = "mult"
    GATEDFFN = "gatedffn"
    C2F = "c2f"
    CHANNEL_C2F = "channel_c2f"


def round_channels(value: float) -> int:
    """Round a fractional channel count half away from zero.

    Returns the raw rounded value; callers enforce the minimum of 1.
    """
    return math.floor(value + 0.5)


class ConvSpec(BaseModel):
    """Convolution geometry."""

    model_config = ConfigDict(frozen=True)

    in_channels: int = Field(..., gt=0)
    out_channels: int = Field(..., gt=0)
    kernel_h: int = Field(default=1, gt=0)
    kernel_w: int = Field(default=1, gt=0)
    stride: int = Field(default=1, gt=0)
    padding: int = Field(default=0, ge=0)
    groups: int = Field(default=1, gt=0)

    @model_validator(mode="after")
    def validate_groups(self) -> "ConvSpec":
        """Channels must split evenly into groups."""
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must both be divisible by groups={self.groups}"
            )
        return self

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (
            self.out_channels,
            self.in_channels // self.groups,
            self.kernel_h,
            self.kernel_w,
        )

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def fan_in(self) -> int:
        return (self.in_channels // self.groups) * self.kernel_h * self.kernel_w

    def output_extent(self, height: int, width: int) -> tuple[int, int] | None:
        """Output (H, W), or None when the geometry does not tile the input exactly."""
        span_h = height + 2 * self.padding - self.kernel_h
        span_w = width + 2 * self.padding - self.kernel_w
        if span_h < 0 or span_w < 0 or span_h % self.stride or span_w % self.stride:
            return None
        return span_h // self.stride + 1, span_w // self.stride + 1

    @classmethod
    def pointwise(cls, in_channels: int, out_channels: int) -> "ConvSpec":
        return cls(in_channels=in_channels, out_channels=out_channels)

    @classmethod
    def square(
        cls, in_channels: int, out_channels: int, kernel: int, stride: int = 1, groups: int = 1
    ) -> "ConvSpec":
        """Square kernel with "same" padding for odd kernels."""
        return cls(
            in_channels=in_channels,
            out_channels=out_channels,
            kernel_h=kernel,
            kernel_w=kernel,
            stride=stride,
            padding=kernel // 2,
            groups=groups,
        )

    @classmethod
    def depthwise(cls, channels: int, kernel: int = 3) -> "ConvSpec":
        return cls.square(channels, channels, kernel, groups=channels)


class NormCfg(BaseModel):
    """Batch-norm hyperparameters shared by every ConvModule of a model."""

    model_config = ConfigDict(frozen=True)

    momentum: float = Field(default=0.03, gt=0, le=1)
    eps: float = Field(default=1e-3, ge=0)


class ConvModuleCfg(BaseModel):
    """Conv followed by optional batch norm and activation."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["conv_module"] = "conv_module"
    spec: ConvSpec
    with_bn: bool = True
    act: Activation = Activation.SILU

    @property
    def has_bias(self) -> bool:
        # BN absorbs the bias
        return not self.with_bn


class ConvFFNCfg(BaseModel):
    """Two pointwise ConvModules with an expanded hidden width."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["convffn"] = "convffn"
    c1: int = Field(..., gt=0)
    c2: int = Field(..., gt=0)
    e: float = Field(default=1.0, ge=0.25)
    add_identity: bool = True

    @model_validator(mode="after")
    def validate_hidden(self) -> "ConvFFNCfg":
        if round_channels(self.c2 * self.e) < 1:
            raise ValueError(f"hidden width round({self.c2}*{self.e}) must be at least 1")
        return self

    @property
    def hidden(self) -> int:
        return round_channels(self.c2 * self.e)

    @property
    def residual(self) -> bool:
        return self.add_identity and self.c1 == self.c2


class MultiplicationCfg(BaseModel):
    """Split-and-multiply FFN; optionally retains the gate for the final compression."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["mult"] = "mult"
    c1: int = Field(..., gt=0)
    c2: int = Field(..., gt=0)
    e: float = Field(default=0.5, gt=0)
    add_identity: bool = True
    retain_gate: bool = False
    gate_merge: GateMerge = GateMerge.CONCAT

    @model_validator(mode="after")
    def validate_half_hidden(self) -> "MultiplicationCfg":
        if round_channels(self.c2 * self.e / 2) < 1:
            raise ValueError(f"half-hidden width round({self.c2}*{self.e}/2) must be at least 1")
        return self

    @property
    def half_hidden(self) -> int:
        return round_channels(self.c2 * self.e / 2)

    @property
    def cv2_in(self) -> int:
        if self.retain_gate and self.gate_merge == GateMerge.CONCAT:
            return 2 * self.half_hidden
        return self.half_hidden

    @property
    def residual(self) -> bool:
        return self.add_identity and self.c1 == self.c2


class RepDWCfg(BaseModel):
    """Parallel depthwise 3x3+BN and 1x1+BN pair, or its fused deploy form."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["repdw"] = "repdw"
    channels: int = Field(..., gt=0)
    mode: RepMode = RepMode.TRAIN


class GatedFFNCfg(BaseModel):
    """Multiplication FFN whose value branch carries a reparameterized depthwise pair."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["gatedffn"] = "gatedffn"
    c1: int = Field(..., gt=0)
    c2: int = Field(..., gt=0)
    e: float = Field(default=3.0, gt=0)
    add_identity: bool = True
    mode: RepMode = RepMode.TRAIN

    @model_validator(mode="after")
    def validate_half_hidden(self) -> "GatedFFNCfg":
        if round_channels(self.c2 * self.e / 2) < 1:
            raise ValueError(f"half-hidden width round({self.c2}*{self.e}/2) must be at least 1")
        return self

    @property
    def half_hidden(self) -> int:
        return round_channels(self.c2 * self.e / 2)

    @property
    def repdw(self) -> RepDWCfg:
        return RepDWCfg(channels=self.half_hidden, mode=self.mode)

    @property
    def residual(self) -> bool:
        return self.add_identity and self.c1 == self.c2


class CEDCfg(BaseModel):
    """Context enhanced downsample: pw expand, dw3x3 stride 1, patch merge, pw compress."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["ced"] = "ced"
    c_in: int = Field(..., gt=0)
    c_out: int = Field(..., gt=0)
    t: Literal[1, 2] = 1

    @property
    def expanded(self) -> int:
        return self.t * self.c_in

    @property
    def merged(self) -> int:
        return 4 * self.t * self.c_in


class BottleneckCfg(BaseModel):
    """Two 3x3 ConvModules with an optional shortcut."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["bottleneck"] = "bottleneck"
    h: int = Field(..., gt=0)
    e_b: float = Field(default=1.0, gt=0)
    shortcut: bool = True

    @model_validator(mode="after")
    def validate_hidden(self) -> "BottleneckCfg":
        if round_channels(self.h * self.e_b) < 1:
            raise ValueError(f"bottleneck width round({self.h}*{self.e_b}) must be at least 1")
        return self

    @property
    def hidden(self) -> int:
        return round_channels(self.h * self.e_b)


class C2fCfg(BaseModel):
    """Split-transform-concat block; ChannelC2f is the (1.0, 0.25) configuration point."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["c2f"] = "c2f"
    c1: int = Field(..., gt=0)
    c2: int = Field(..., gt=0)
    n: int = Field(default=1, ge=0)
    e_overall: float = Field(default=0.5, gt=0)
    e_bottleneck: float = Field(default=1.0, gt=0)
    shortcut: bool = True

    @model_validator(mode="after")
    def validate_hidden(self) -> "C2fCfg":
        if round_channels(self.c2 * self.e_overall) < 1:
            raise ValueError(f"hidden width round({self.c2}*{self.e_overall}) must be at least 1")
        if self.n and round_channels(self.hidden * self.e_bottleneck) < 1:
            raise ValueError("bottleneck width must be at least 1")
        return self

    @property
    def hidden(self) -> int:
        return round_channels(self.c2 * self.e_overall)

    @property
    def concat_width(self) -> int:
        return (2 + self.n) * self.hidden

    @property
    def bottleneck(self) -> BottleneckCfg:
        return BottleneckCfg(h=self.hidden, e_b=self.e_bottleneck, shortcut=self.shortcut)

    @classmethod
    def channel_c2f(cls, c1: int, c2: int, n: int = 1, *, shortcut: bool = True) -> "C2fCfg":
        return cls(c1=c1, c2=c2, n=n, e_overall=1.0, e_bottleneck=0.25, shortcut=shortcut)


BlockCfg = Annotated[
    ConvModuleCfg
    | ConvFFNCfg
    | MultiplicationCfg
    | RepDWCfg
    | GatedFFNCfg
    | CEDCfg
    | BottleneckCfg
    | C2fCfg,
    Field(discriminator="kind"),
]


class StemCfg(BaseModel):
    model_config = ConfigDict(frozen=True)

    width: int = Field(default=16, gt=0)
    kernel: int = Field(default=3, gt=0)
    stride: int = Field(default=2, gt=0)


class StageCfg(BaseModel):
    """One backbone stage: an optional CED downsample followed by a run of blocks."""

    model_config = ConfigDict(frozen=True)

    width: int = Field(..., gt=0)
    block_count: int = Field(default=3, ge=0)
    block_kind: BlockKind = BlockKind.GATEDFFN
    expansion: float = Field(default=3.0, gt=0)
    downsample: Literal["ced", "none"] = "ced"
    ced_t: Literal[1, 2] = 1
    blocks: list[BlockCfg] | None = None

    @model_validator(mode="after")
    def validate_explicit_blocks(self) -> "StageCfg":
        if self.blocks is not None and len(self.blocks) != self.block_count:
            raise ValueError(
                f"block_count={self.block_count} but {len(self.blocks)} explicit blocks given"
            )
        return self

    @property
    def stride(self) -> int:
        return 2 if self.downsample == "ced" else 1


class HeadCfg(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["none", "classifier"] = "none"
    classes: int = Field(default=4, ge=2)
    in_features: int | None = Field(default=None, gt=0)


DESK_WIDTHS = (16, 32, 64, 128, 256)
DESK_RATIOS = (3, 3, 6, 3)


class BackboneCfg(BaseModel):
    """Stem plus stages; stage outputs are the backbone features."""

    model_config = ConfigDict(frozen=True)

    name: str = "remdet"
    in_channels: int = Field(default=3, gt=0)
    stem: StemCfg = StemCfg()
    stages: list[StageCfg] = Field(..., min_length=1)
    norm: NormCfg = NormCfg()
    mode: RepMode = RepMode.TRAIN

    @property
    def stage_strides(self) -> list[int]:
        """Cumulative stride of every stage output relative to the input."""
        strides = []
        current = self.stem.stride
        for stage in self.stages:
            current *= stage.stride
            strides.append(current)
        return strides

    @property
    def total_stride(self) -> int:
        return self.stage_strides[-1]

    @property
    def block_counts(self) -> tuple[int, ...]:
        return tuple(stage.block_count for stage in self.stages)

    @property
    def out_channels(self) -> int:
        return self.stages[-1].width


class ModelCfg(BackboneCfg):
    """Backbone with an optional toy classifier head and a compute dtype."""

    head: HeadCfg = HeadCfg()
    dtype: DType = DType.F32

    @classmethod
    def desk(
        cls,
        widths: tuple[int, ...] = DESK_WIDTHS,
        ratios: tuple[int, ...] = DESK_RATIOS,
        *,
        name: str = "remdet-tiny-desk",
        dtype: DType = DType.F32,
    ) -> "ModelCfg":
        """Desk-scale backbone: CED expansion t=2 at the first stage only."""
        if len(widths) != len(ratios) + 1:
            raise ValueError("widths must hold the stem width plus one width per stage")
        stages = [
            StageCfg(width=width, block_count=count, ced_t=2 if index == 0 else 1)
            for index, (width, count) in enumerate(zip(widths[1:], ratios, strict=True))
        ]
        return cls(name=name, stem=StemCfg(width=widths[0]), stages=stages, dtype=dtype)

    @classmethod
    def toy_classifier(
        cls,
        block_kind: BlockKind,
        expansion: float,
        classes: int = 4,
        *,
        width: int = 16,
        blocks: int = 2,
        dtype: DType = DType.F32,
    ) -> "ModelCfg":
        """Stem conv, a run of blocks without downsampling, pooled linear head."""
        return cls(
            name=f"toy-{block_kind.value}",
            in_channels=1,
            stem=StemCfg(width=width),
            stages=[
                StageCfg(
                    width=width,
                    block_count=blocks,
                    block_kind=block_kind,
                    expansion=expansion,
                    downsample="none",
                )
            ],
            head=HeadCfg(kind="classifier", classes=classes),
            dtype=dtype,
        )
