"""Shared data models."""

from shared.models.architecture import (
    DESK_RATIOS,
    DESK_WIDTHS,
    Activation,
    BackboneCfg,
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
    HeadCfg,
    ModelCfg,
    MultiplicationCfg,
    NormCfg,
    RepDWCfg,
    RepMode,
    StageCfg,
    StemCfg,
    round_channels,
)
from shared.models.reports import (
    BenchReport,
    FusionReport,
    GradcheckEntry,
    GradcheckReport,
    MacReport,
    RankReport,
    SweepRow,
    SweepTable,
    TrainResult,
)
from shared.models.training import SgdHyper

__all__ = [
    "DESK_RATIOS",
    "DESK_WIDTHS",
    "Activation",
    "BackboneCfg",
    "BenchReport",
    "BlockCfg",
    "BlockKind",
    "BottleneckCfg",
    "C2fCfg",
    "CEDCfg",
    "ConvFFNCfg",
    "ConvModuleCfg",
    "ConvSpec",
    "DType",
    "FusionReport",
    "GateMerge",
    "GatedFFNCfg",
    "GradcheckEntry",
    "GradcheckReport",
    "HeadCfg",
    "MacReport",
    "ModelCfg",
    "MultiplicationCfg",
    "NormCfg",
    "RankReport",
    "RepDWCfg",
    "RepMode",
    "SgdHyper",
    "StageCfg",
    "StemCfg",
    "SweepRow",
    "SweepTable",
    "TrainResult",
    "round_channels",
]
