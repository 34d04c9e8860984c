"""Cost accounting and the numerical experiments behind the multiplication design.

MAC convention: one multiply-add of a convolution or linear layer counts as
one unit; batch norm, activations, elementwise and merge ops are free. Counts
are per sample (batch size 1).
"""

import itertools
import time
from collections.abc import Sequence
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import pandas as pd
from pydantic import ValidationError

from networks.remdet.src.blocks import (
    Model,
    block_io,
    bottleneck_layers,
    build_backbone,
    build_block,
    c2f_layers,
    ced_layers,
    convffn_layers,
    gatedffn_layers,
    multiplication_layers,
    repdw_layers,
    resolve_stages,
    stem_layer,
    stem_padding,
)
from networks.remdet.src.errors import InsufficientSamplesError, InvalidConfigError
from networks.remdet.src.ops import use_executor
from networks.remdet.src.tensor import Array, Tensor
from shared.models import (
    BenchReport,
    BlockCfg,
    BottleneckCfg,
    C2fCfg,
    CEDCfg,
    ConvFFNCfg,
    ConvModuleCfg,
    ConvSpec,
    DType,
    GatedFFNCfg,
    MacReport,
    ModelCfg,
    MultiplicationCfg,
    RankReport,
    RepDWCfg,
    RepMode,
    SweepRow,
    SweepTable,
)
from shared.monitoring import get_logger

logger = get_logger(__name__)

DEFAULT_SWEEP_E = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0)
DEFAULT_STAGE_RATIOS: tuple[tuple[int, ...], ...] = (
    (3, 3, 3, 3),
    (3, 6, 3, 3),
    (3, 3, 6, 3),
    (3, 6, 6, 3),
    (3, 3, 3, 6),
    (6, 6, 6, 6),
)
RANK_TOLERANCE = 1e-8

# ConvFFN(e) = 2e*c^2*HW and Multiplication(e) = 1.5e*c^2*HW
CONVFFN_COEFF = Fraction(2)
MULT_COEFF = Fraction(3, 2)
CROSS_E_MULT = 9
CROSS_E_CONVFFN = 7


# Analytic counter


def conv_macs(spec: ConvSpec, out_h: int, out_w: int) -> int:
    taps = (spec.in_channels // spec.groups) * spec.kernel_h * spec.kernel_w
    return taps * spec.out_channels * out_h * out_w


def _conv_module(
    name: str, cfg: ConvModuleCfg, height: int, width: int
) -> tuple[MacReport, int, int]:
    spec = cfg.spec
    extent = spec.output_extent(height, width)
    if extent is None:
        raise InvalidConfigError(
            f"{spec.kernel_h}x{spec.kernel_w} stride {spec.stride} conv does not tile "
            f"a {height}x{width} input",
            name,
        )
    out_h, out_w = extent
    params = spec.out_channels * spec.fan_in
    if cfg.has_bias:
        params += spec.out_channels
    if cfg.with_bn:
        params += 2 * spec.out_channels
    return MacReport.leaf(name, conv_macs(spec, out_h, out_w), params), out_h, out_w


def _repdw(name: str, cfg: RepDWCfg, height: int, width: int) -> MacReport:
    if cfg.mode is RepMode.DEPLOY:
        spec = ConvSpec.depthwise(cfg.channels)
        fused = MacReport.leaf(
            "fused", conv_macs(spec, height, width), spec.out_channels * (spec.fan_in + 1)
        )
        return MacReport.node(name, [fused])
    dw3, dw1 = repdw_layers(cfg)
    return MacReport.node(
        name,
        [_conv_module("dw3", dw3, height, width)[0], _conv_module("dw1", dw1, height, width)[0]],
    )


def _chain(
    name: str, layers: Sequence[tuple[str, ConvModuleCfg]], height: int, width: int
) -> tuple[MacReport, int, int]:
    children = []
    for child_name, layer in layers:
        report, height, width = _conv_module(child_name, layer, height, width)
        children.append(report)
    return MacReport.node(name, children), height, width


def block_report(
    name: str, cfg: BlockCfg, height: int, width: int
) -> tuple[MacReport, int, int]:
    """MAC/param tree of one block and its output extent."""
    match cfg:
        case ConvModuleCfg():
            return _conv_module(name, cfg, height, width)
        case ConvFFNCfg():
            cv1, cv2 = convffn_layers(cfg)
            return _chain(name, [("cv1", cv1), ("cv2", cv2)], height, width)
        case MultiplicationCfg():
            cv1, cv2 = multiplication_layers(cfg)
            return _chain(name, [("cv1", cv1), ("cv2", cv2)], height, width)
        case RepDWCfg():
            return _repdw(name, cfg, height, width), height, width
        case GatedFFNCfg():
            cv1, cv2 = gatedffn_layers(cfg)
            children = [
                _conv_module("cv1", cv1, height, width)[0],
                _repdw("repdw", cfg.repdw, height, width),
                _conv_module("cv2", cv2, height, width)[0],
            ]
            return MacReport.node(name, children), height, width
        case CEDCfg():
            if height % 2 or width % 2:
                raise InvalidConfigError(f"CED needs even extents, got {height}x{width}", name)
            expand, dw, compress = ced_layers(cfg)
            children = [
                _conv_module("expand", expand, height, width)[0],
                _conv_module("dw", dw, height, width)[0],
                _conv_module("compress", compress, height // 2, width // 2)[0],
            ]
            return MacReport.node(name, children), height // 2, width // 2
        case BottleneckCfg():
            cv1, cv2 = bottleneck_layers(cfg)
            return _chain(name, [("cv1", cv1), ("cv2", cv2)], height, width)
        case C2fCfg():
            cv1, cv2 = c2f_layers(cfg)
            children = [_conv_module("cv1", cv1, height, width)[0]]
            children += [
                block_report(f"bottlenecks.{index}", cfg.bottleneck, height, width)[0]
                for index in range(cfg.n)
            ]
            children.append(_conv_module("cv2", cv2, height, width)[0])
            return MacReport.node(name, children), height, width
    raise InvalidConfigError(f"unsupported block {type(cfg).__name__}", name)


def _model_report(cfg: ModelCfg, height: int, width: int) -> MacReport:
    plans = resolve_stages(cfg)
    stride = cfg.total_stride
    if height % stride or width % stride:
        raise InvalidConfigError(
            f"input {height}x{width} is not divisible by the total stride {stride}", "input"
        )
    leading, trailing = stem_padding(cfg.stem)
    stem, height, width = _conv_module(
        "stem", stem_layer(cfg), height + leading + trailing, width + leading + trailing
    )
    children = [stem]
    for index, plan in enumerate(plans):
        stage_children = []
        if plan.downsample is not None:
            report, height, width = block_report("downsample", plan.downsample, height, width)
            stage_children.append(report)
        for position, block in enumerate(plan.blocks):
            report, height, width = block_report(f"blocks.{position}", block, height, width)
            stage_children.append(report)
        if stage_children:
            children.append(MacReport.node(f"stages.{index}", stage_children))
    if cfg.head.kind == "classifier":
        features = cfg.out_channels
        classes = cfg.head.classes
        children.append(MacReport.leaf("head", features * classes, features * classes + classes))
    return MacReport.node(cfg.name, children)


def count_macs_params(cfg: BlockCfg | ModelCfg, input_hw: tuple[int, int]) -> MacReport:
    """Exact per-sample MAC and parameter counts as a tree.

    Parameters count conv weights and biases plus BN gamma/beta (running
    statistics are state, not parameters) and the classifier head.

    Raises:
        InvalidConfigError: Zero or incompatible spatial size, or an invalid cfg

    """
    height, width = input_hw
    if height <= 0 or width <= 0:
        raise InvalidConfigError(f"input extent must be positive, got {height}x{width}", "input")
    if isinstance(cfg, ModelCfg):
        return _model_report(cfg, height, width)
    return block_report(cfg.kind, cfg, height, width)[0]


# Counting oracle


class CountingExecutor:
    """Tap-loop convolution and linear kernels that count every scalar multiply."""

    def __init__(self) -> None:
        self.multiplies = 0

    def conv2d(self, x: Array, w: Array, spec: ConvSpec) -> Array:
        n, _, height, width = x.shape
        extent = spec.output_extent(height, width)
        if extent is None:
            raise InvalidConfigError("counting executor got a non-integral geometry")
        out_h, out_w = extent
        pad, stride = spec.padding, spec.stride
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        per_group = spec.in_channels // spec.groups
        per_group_out = spec.out_channels // spec.groups
        out = np.zeros((n, spec.out_channels, out_h, out_w), dtype=x.dtype)
        for oc, i, j in itertools.product(
            range(spec.out_channels), range(spec.kernel_h), range(spec.kernel_w)
        ):
            first = (oc // per_group_out) * per_group
            window = padded[
                :,
                first : first + per_group,
                i : i + stride * (out_h - 1) + 1 : stride,
                j : j + stride * (out_w - 1) + 1 : stride,
            ]
            products = window * w[oc, :, i, j].reshape(1, -1, 1, 1)
            self.multiplies += products.size
            out[:, oc] += products.sum(axis=1)
        return out

    def linear(self, x: Array, w: Array) -> Array:
        out = np.zeros((x.shape[0], w.shape[0]), dtype=x.dtype)
        for k in range(w.shape[0]):
            products = x * w[k]
            self.multiplies += products.size
            out[:, k] = products.sum(axis=1)
        return out


def mac_oracle(cfg: BlockCfg | ModelCfg, input_hw: tuple[int, int], seed: int = 0) -> int:
    """Run the cfg once at batch size 1 through the counting executor.

    Raises:
        InvalidConfigError: The cfg cannot execute at the given size

    """
    height, width = input_hw
    if height <= 0 or width <= 0:
        raise InvalidConfigError(f"input extent must be positive, got {height}x{width}", "input")
    rng = np.random.default_rng(seed)
    executor = CountingExecutor()
    try:
        if isinstance(cfg, ModelCfg):
            model = build_backbone(cfg.model_copy(update={"dtype": DType.F64}), seed)
            x = Tensor.randn((1, cfg.in_channels, height, width), rng, DType.F64)
            with use_executor(executor):
                if model.params.head is not None:
                    model.classify(x)
                else:
                    model.features(x)
        else:
            module = build_block(cfg, seed, dtype=DType.F64)
            x = Tensor.randn((1, block_io(cfg)[0], height, width), rng, DType.F64)
            with use_executor(executor):
                module.forward(x)
    except ValueError as e:
        error_msg = f"cannot execute {getattr(cfg, 'kind', getattr(cfg, 'name', 'cfg'))}: {e}"
        logger.error(error_msg)
        raise InvalidConfigError(error_msg) from e
    return executor.multiplies


# Expansion sweep


def _validated(
    kind: type[ConvFFNCfg] | type[MultiplicationCfg], c: int, e: float, path: str
) -> BlockCfg:
    try:
        return kind(c1=c, c2=c, e=e)
    except ValidationError as error:
        raise InvalidConfigError(
            f"expansion {e} leaves no hidden channels for c={c}", path
        ) from error


def expansion_sweep(
    c: int,
    input_hw: tuple[int, int],
    e_values: Sequence[float] = DEFAULT_SWEEP_E,
    *,
    oracle: bool = False,
) -> SweepTable:
    """MACs of ConvFFN and Multiplication across expansion factors at width c.

    Closed forms: ConvFFN(e) = 2e*c^2*HW and Multiplication(e) = 1.5e*c^2*HW.
    The table also carries Multiplication(9)/ConvFFN(7), exactly 27/28 in
    closed form, and its measured counterpart.
    """
    height, width = input_hw
    area = height * width
    rows = []
    for index, e in enumerate(e_values):
        convffn = _validated(ConvFFNCfg, c, e, f"e[{index}]")
        mult = _validated(MultiplicationCfg, c, e, f"e[{index}]")
        macs_convffn = count_macs_params(convffn, input_hw).macs
        macs_mult = count_macs_params(mult, input_hw).macs
        exact_e = Fraction(e)
        rows.append(
            SweepRow(
                e=e,
                macs_convffn=macs_convffn,
                macs_mult=macs_mult,
                ratio=macs_mult / macs_convffn,
                closed_convffn=float(CONVFFN_COEFF * exact_e * c * c * area),
                closed_mult=float(MULT_COEFF * exact_e * c * c * area),
                oracle_convffn=mac_oracle(convffn, input_hw) if oracle else None,
                oracle_mult=mac_oracle(mult, input_hw) if oracle else None,
            )
        )
    cross_exact = (MULT_COEFF * CROSS_E_MULT) / (CONVFFN_COEFF * CROSS_E_CONVFFN)
    measured_mult = count_macs_params(MultiplicationCfg(c1=c, c2=c, e=CROSS_E_MULT), input_hw)
    measured_convffn = count_macs_params(ConvFFNCfg(c1=c, c2=c, e=CROSS_E_CONVFFN), input_hw)
    table = SweepTable(
        c=c,
        height=height,
        width=width,
        rows=rows,
        cross_ratio=float(cross_exact),
        cross_ratio_exact=f"{cross_exact.numerator}/{cross_exact.denominator}",
        cross_ratio_measured=measured_mult.macs / measured_convffn.macs,
    )
    logger.info(
        f"Expansion sweep c={c} {height}x{width}: {len(rows)} rows, "
        f"cross ratio {table.cross_ratio_exact} measured {table.cross_ratio_measured:.4f}"
    )
    return table


def sweep_frame(table: SweepTable) -> pd.DataFrame:
    """One row per expansion; the cross-ratio columns repeat on every row."""
    frame = pd.DataFrame([row.model_dump() for row in table.rows])
    frame.insert(0, "c", table.c)
    frame["cross_ratio"] = table.cross_ratio_exact
    frame["cross_ratio_measured"] = table.cross_ratio_measured
    return frame


# Quadratic-term rank experiment


@dataclass(frozen=True)
class RankProbe:
    """One draw of (w1, w2, x) for the quadratic form x -> (w1.x)(w2.x)."""

    d: int
    w1: Array
    w2: Array
    x: Array

    @classmethod
    def draw(cls, d: int, rng: np.random.Generator) -> "RankProbe":
        return cls(
            d=d,
            w1=rng.standard_normal(d),
            w2=rng.standard_normal(d),
            x=rng.standard_normal(d),
        )

    def coefficients(self) -> Array:
        """Symmetrized outer product 0.5*(w1 w2^T + w2 w1^T)."""
        outer = np.outer(self.w1, self.w2)
        return 0.5 * (outer + outer.T)

    def value(self) -> float:
        return float((self.w1 @ self.x) * (self.w2 @ self.x))


def monomial_oracle(d: int) -> int:
    """Count the distinct degree-2 monomials x_i*x_j with i <= j."""
    if d < 1:
        raise ValueError(f"d must be at least 1, got {d}")
    return sum(1 for _ in itertools.combinations_with_replacement(range(d), 2))


def rank_experiment(
    d: int, samples: int, tol: float = RANK_TOLERANCE, seed: int = 0
) -> RankReport:
    """Numerical rank of stacked quadratic-form coefficient vectors.

    Passes iff the rank equals d(d+1)/2, the number of distinct quadratic terms.

    Raises:
        InsufficientSamplesError: samples < d(d+1)/2 + d

    """
    if d < 1:
        raise ValueError(f"d must be at least 1, got {d}")
    expected = d * (d + 1) // 2
    if samples < expected + d:
        raise InsufficientSamplesError(
            f"rank test at d={d} needs at least {expected + d} samples, got {samples}"
        )
    rng = np.random.default_rng(seed)
    rows = np.stack([RankProbe.draw(d, rng).coefficients().reshape(-1) for _ in range(samples)])
    singular = np.linalg.svd(rows, compute_uv=False)
    sigma_max = float(singular[0])
    cutoff = tol * sigma_max
    rank = int(np.count_nonzero(singular > cutoff))
    report = RankReport(
        d=d,
        samples=samples,
        estimated_rank=rank,
        expected=expected,
        tol=tol,
        sigma_max=sigma_max,
        sigma_cutoff=cutoff,
        passed=rank == expected,
    )
    logger.info(f"Rank experiment d={d}: rank {rank}, expected {expected}")
    return report


# Architecture comparisons


def block_comparison(c: int, input_hw: tuple[int, int]) -> pd.DataFrame:
    """MACs and params of each block family at equal in/out width."""
    candidates: list[tuple[str, BlockCfg]] = [
        ("convffn_e3", ConvFFNCfg(c1=c, c2=c, e=3.0)),
        ("mult_e3", MultiplicationCfg(c1=c, c2=c, e=3.0)),
        ("gatedffn_e3", GatedFFNCfg(c1=c, c2=c, e=3.0)),
        ("c2f_n1", C2fCfg(c1=c, c2=c, n=1)),
        ("channel_c2f_n1", C2fCfg.channel_c2f(c, c, n=1)),
    ]
    rows = []
    for name, cfg in candidates:
        report = count_macs_params(cfg, input_hw)
        rows.append({"block": name, "c": c, "macs": report.macs, "params": report.params})
    return pd.DataFrame(rows)


def _with_ratio(cfg: ModelCfg, ratio: Sequence[int]) -> ModelCfg:
    if len(ratio) != len(cfg.stages):
        raise InvalidConfigError(
            f"ratio {tuple(ratio)} has {len(ratio)} entries for {len(cfg.stages)} stages", "stages"
        )
    for index, stage in enumerate(cfg.stages):
        if stage.blocks is not None:
            raise InvalidConfigError(
                "stages with explicit blocks cannot be re-proportioned", f"stages.{index}.blocks"
            )
    stages = [
        stage.model_copy(update={"block_count": count})
        for stage, count in zip(cfg.stages, ratio, strict=True)
    ]
    return cfg.model_copy(update={"stages": stages})


def stage_ratio_sweep(
    cfg: ModelCfg,
    ratios: Sequence[Sequence[int]] = DEFAULT_STAGE_RATIOS,
    input_hw: tuple[int, int] = (64, 64),
) -> pd.DataFrame:
    """Params and MACs of the backbone under candidate stage block ratios."""
    rows = []
    for ratio in ratios:
        report = count_macs_params(_with_ratio(cfg, ratio), input_hw)
        label = ":".join(str(count) for count in ratio)
        rows.append({"ratio": label, "params": report.params, "macs": report.macs})
    return pd.DataFrame(rows)


def ced_expansion_costs(cfg: ModelCfg, input_hw: tuple[int, int] = (64, 64)) -> pd.DataFrame:
    """Cost of CED input expansion t=2 at no stage, the first stage only, or every stage."""
    placements = {
        "none": lambda _index: 1,
        "first_stage": lambda index: 2 if index == 0 else 1,
        "all_stages": lambda _index: 2,
    }
    rows = []
    for placement, t_for in placements.items():
        stages = [
            stage.model_copy(update={"ced_t": t_for(index)})
            for index, stage in enumerate(cfg.stages)
        ]
        report = count_macs_params(cfg.model_copy(update={"stages": stages}), input_hw)
        rows.append({"ced_expansion": placement, "params": report.params, "macs": report.macs})
    return pd.DataFrame(rows)


def mac_table(report: MacReport, *, per_layer: bool = False) -> pd.DataFrame:
    """Leaves (or top-level children) plus a total row whose counts are their sums."""
    if per_layer:
        entries = [(path, leaf.macs, leaf.params) for path, leaf in report.leaves()]
    else:
        entries = [
            (f"{report.name}.{child.name}", child.macs, child.params) for child in report.children
        ]
    entries.append(("total", report.macs, report.params))
    return pd.DataFrame(entries, columns=["node", "macs", "params"])


# Benchmarking


def benchmark_forward(
    model: Model,
    input_hw: tuple[int, int],
    iters: int = 20,
    warmup: int = 3,
    seed: int = 0,
    batch: int = 1,
) -> BenchReport:
    """Wall-clock forward timings; informational only."""
    if iters < 1 or warmup < 0:
        raise ValueError(f"need iters >= 1 and warmup >= 0, got {iters} and {warmup}")
    rng = np.random.default_rng(seed)
    x = Tensor.randn((batch, model.cfg.in_channels, *input_hw), rng, model.dtype)
    for _ in range(warmup):
        model.features(x)
    timings = []
    for _ in range(iters):
        start = time.perf_counter()
        model.features(x)
        timings.append((time.perf_counter() - start) * 1000)
    p10, median, p90 = np.percentile(timings, [10, 50, 90])
    cost = count_macs_params(model.cfg, input_hw)
    logger.info(f"Benchmark {model.cfg.name}: median {median:.2f}ms over {iters} iters")
    return BenchReport(
        iters=iters,
        warmup=warmup,
        median_ms=float(median),
        p10_ms=float(p10),
        p90_ms=float(p90),
        macs=cost.macs,
        params=cost.params,
        fused=model.cfg.mode is RepMode.DEPLOY,
    )
