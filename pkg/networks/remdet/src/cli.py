"""`remdet` command-line entry point.

Results go to stdout as a human table or, with ``--format csv|jsonl``, as
machine-readable records; logs and diagnostics go to stderr.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

import argparse
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, TextIO

import pandas as pd

from networks.remdet.src.analysis import (
    DEFAULT_STAGE_RATIOS,
    DEFAULT_SWEEP_E,
    benchmark_forward,
    ced_expansion_costs,
    count_macs_params,
    expansion_sweep,
    mac_table,
    monomial_oracle,
    rank_experiment,
    stage_ratio_sweep,
    sweep_frame,
)
from networks.remdet.src.blocks import build_backbone, resolve_stages
from networks.remdet.src.config import metrics_tracker, settings
from networks.remdet.src.errors import DivergedLossError, RemdetError
from networks.remdet.src.gradcheck import gradcheck_block
from networks.remdet.src.model_io import load_config, load_weights, save_config, save_weights
from networks.remdet.src.ops import set_num_threads
from networks.remdet.src.reparam import fuse_model, verify_fusion
from networks.remdet.src.toy_train import TOY_BLOCK_KINDS, train_toy
from shared.models import (
    BlockCfg,
    BottleneckCfg,
    C2fCfg,
    CEDCfg,
    ConvFFNCfg,
    GatedFFNCfg,
    MultiplicationCfg,
    RepDWCfg,
    SgdHyper,
)
from shared.monitoring import get_logger, setup_logging

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

FORMATS = ("table", "csv", "jsonl")
GRADCHECK_BLOCKS = (
    "convffn",
    "mult",
    "repdw",
    "gatedffn",
    "ced",
    "bottleneck",
    "c2f",
    "channel_c2f",
)


class CheckFailed(Exception):
    """A verification ran to completion and did not pass."""


# Argument types


def extent(text: str) -> tuple[int, int]:
    """Parse ``HxW`` (or a single ``S`` for a square input)."""
    parts = text.lower().split("x")
    try:
        values = [int(part) for part in parts]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from e
    if len(values) == 1:
        values *= 2
    if len(values) != 2 or min(values) <= 0:
        raise argparse.ArgumentTypeError(f"expected positive HxW, got {text!r}")
    return values[0], values[1]


def ratio(text: str) -> tuple[int, ...]:
    try:
        counts = tuple(int(part) for part in text.split(":"))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected counts like 3:3:6:3, got {text!r}") from e
    if any(count < 0 for count in counts):
        raise argparse.ArgumentTypeError(f"block counts must be non-negative, got {text!r}")
    return counts


# Output


def emit(frame: pd.DataFrame, schema: str, fmt: str, out: TextIO | None = None) -> None:
    """Write one table; CSV starts with a versioned ``# schema=<name>.v1`` line."""
    stream = out or sys.stdout
    if fmt == "csv":
        stream.write(f"# schema={schema}.v1\n")
        frame.to_csv(stream, index=False, lineterminator="\n")
    elif fmt == "jsonl":
        if not frame.empty:
            stream.write(frame.to_json(orient="records", lines=True).rstrip("\n") + "\n")
    else:
        stream.write(frame.to_string(index=False) + "\n")


def _record_frame(record: dict[str, Any]) -> pd.DataFrame:
    return pd.DataFrame([record])


# Commands


def cmd_describe(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    resolve_stages(cfg)
    side = 2 * cfg.total_stride
    report = count_macs_params(cfg, (side, side))
    stem = report.find("stem")
    rows: list[dict[str, Any]] = [
        {
            "part": "stem",
            "width": cfg.stem.width,
            "block_kind": f"conv{cfg.stem.kernel}x{cfg.stem.kernel}",
            "blocks": 1,
            "ced_t": None,
            "expansion": None,
            "stride": cfg.stem.stride,
            "params": stem.params if stem else 0,
        }
    ]
    for index, (stage, stride) in enumerate(zip(cfg.stages, cfg.stage_strides, strict=True)):
        node = report.find(f"stages.{index}")
        rows.append(
            {
                "part": f"stages.{index}",
                "width": stage.width,
                "block_kind": "explicit" if stage.blocks is not None else stage.block_kind.value,
                "blocks": stage.block_count,
                "ced_t": stage.ced_t if stage.downsample == "ced" else None,
                "expansion": stage.expansion if stage.blocks is None else None,
                "stride": stride,
                "params": node.params if node else 0,
            }
        )
    head = report.find("head")
    if head is not None:
        rows.append({"part": "head", "width": cfg.head.classes, "params": head.params})
    rows.append({"part": "total", "params": report.params})
    emit(pd.DataFrame(rows), "describe", args.format)
    return EXIT_OK


def cmd_flops(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    report = count_macs_params(cfg, args.input)
    emit(mac_table(report, per_layer=args.per_layer), "flops", args.format)
    return EXIT_OK


def gradcheck_cfg(
    kind: str, c1: int, c2: int, e: float | None, *, retain_gate: bool = False, ced_t: int = 1
) -> BlockCfg:
    """Block config for a gradcheck run; `e` falls back to each block's default."""
    expansion: dict[str, float] = {} if e is None else {"e": e}
    match kind:
        case "convffn":
            return ConvFFNCfg(c1=c1, c2=c2, **expansion)
        case "mult":
            return MultiplicationCfg(c1=c1, c2=c2, retain_gate=retain_gate, **expansion)
        case "gatedffn":
            return GatedFFNCfg(c1=c1, c2=c2, **expansion)
        case "repdw":
            return RepDWCfg(channels=c1)
        case "ced":
            return CEDCfg(c_in=c1, c_out=c2, t=2 if ced_t == 2 else 1)
        case "bottleneck":
            return BottleneckCfg(h=c1, e_b=e if e is not None else 1.0)
        case "c2f":
            return C2fCfg(c1=c1, c2=c2, n=1)
        case "channel_c2f":
            return C2fCfg.channel_c2f(c1, c2, n=1)
    raise ValueError(f"unknown block {kind!r}")


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = gradcheck_cfg(
        args.block, args.c1, args.c2, args.e, retain_gate=args.retain_gate, ced_t=args.ced_t
    )
    report = gradcheck_block(cfg, args.seed, tol=args.tol, input_hw=args.input)
    frame = pd.DataFrame([entry.model_dump() for entry in report.entries])
    emit(frame, "gradcheck", args.format)
    if not report.passed:
        raise CheckFailed(f"gradcheck failed for {report.block}: worst {report.worst.name}")
    return EXIT_OK


def cmd_fuse(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.weights is not None:
        model = load_weights(args.weights, cfg)
    else:
        model = build_backbone(cfg, args.seed)
    fused = fuse_model(model)
    out = Path(args.out)
    save_weights(fused, out)
    save_config(fused.cfg, out.with_name(f"{out.name}.json"))
    if not args.verify:
        side = 2 * cfg.total_stride
        before = count_macs_params(model.cfg, (side, side))
        after = count_macs_params(fused.cfg, (side, side))
        emit(
            _record_frame(
                {
                    "out": str(out),
                    "macs_before": before.macs,
                    "macs_after": after.macs,
                    "params_before": before.params,
                    "params_after": after.params,
                }
            ),
            "fuse",
            args.format,
        )
        return EXIT_OK
    report = verify_fusion(model, fused, args.samples, args.tol, args.seed)
    tracker = metrics_tracker(f"fuse-{cfg.name}", enabled=args.track or None)
    with tracker.start_run():
        tracker.log_metrics(
            {"max_abs_diff": report.max_abs_diff, "mac_delta": float(report.mac_delta)}
        )
    emit(_record_frame(report.model_dump()), "fuse", args.format)
    if not report.passed:
        raise CheckFailed(f"fused outputs differ by {report.max_abs_diff:.3e} > {args.tol:g}")
    if report.argmax_agreement is not None and report.argmax_agreement < 1.0:
        raise CheckFailed(
            f"fused predictions agree on only {report.argmax_agreement:.2%} of the inputs"
        )
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    model = build_backbone(cfg, args.seed)
    target = fuse_model(model) if args.fused else model
    tracker = metrics_tracker(f"bench-{cfg.name}", enabled=args.track or None)
    with tracker.start_run(), tracker.track_time("bench_total_ms"):
        report = benchmark_forward(target, args.input, args.iters, args.warmup, args.seed)
        if args.fused:
            unfused = count_macs_params(model.cfg, args.input)
            report = report.model_copy(update={"mac_delta": report.macs - unfused.macs})
        tracker.log_metrics(
            {"median_ms": report.median_ms, "p10_ms": report.p10_ms, "p90_ms": report.p90_ms}
        )
    record = report.model_dump()
    if not args.fused:
        record.pop("mac_delta")
    emit(_record_frame(record), "bench", args.format)
    return EXIT_OK


def cmd_train_toy(args: argparse.Namespace) -> int:
    hyper = SgdHyper(lr=args.lr or settings.toy_learning_rate, schedule=args.schedule)
    result = train_toy(
        args.block,
        args.expansion,
        args.steps,
        args.seed,
        hyper=hyper,
        samples=args.samples,
        tracker=metrics_tracker(enabled=args.track or None),
    )
    if args.format == "table":
        summary = result.model_dump(exclude={"loss_curve"})
        emit(_record_frame(summary), "train_toy", args.format)
    else:
        curve = pd.DataFrame({"step": range(len(result.loss_curve)), "loss": result.loss_curve})
        emit(curve, "loss_curve", args.format)
    return EXIT_OK


def cmd_rank(args: argparse.Namespace) -> int:
    report = rank_experiment(args.dim, args.samples, args.tol, args.seed)
    monomials = monomial_oracle(args.dim)
    emit(_record_frame({**report.model_dump(), "monomials": monomials}), "rank", args.format)
    if not report.passed or monomials != report.expected:
        raise CheckFailed(
            f"rank {report.estimated_rank} != expected {report.expected} "
            f"({monomials} distinct quadratic terms)"
        )
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    table = expansion_sweep(args.c, args.input, args.e or DEFAULT_SWEEP_E, oracle=args.oracle)
    emit(sweep_frame(table), "sweep", args.format)
    if args.oracle and not table.consistent:
        raise CheckFailed("analytic MAC counts diverge from the counting oracle")
    return EXIT_OK


def cmd_ratios(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    candidates = args.ratio or DEFAULT_STAGE_RATIOS
    emit(stage_ratio_sweep(cfg, candidates, args.input), "ratios", args.format)
    if args.format == "table":
        sys.stdout.write("\n")
    emit(ced_expansion_costs(cfg, args.input), "ced_expansion", args.format)
    return EXIT_OK


def cmd_init(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    model = build_backbone(cfg, args.seed)
    save_weights(model, args.out)
    record = {"out": str(args.out), "tensors": len(list(model.named_tensors()))}
    record["params"] = model.parameter_count()
    emit(_record_frame(record), "init", args.format)
    return EXIT_OK


# Parser


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=FORMATS, default="table")
    common.add_argument(
        "--threads",
        type=int,
        default=settings.threads,
        help="worker threads for convolutions (default: REMDET_THREADS or 1)",
    )
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    common.add_argument("--track", action="store_true", help="log metrics to MLflow")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog="remdet",
        description="RemDet desk toolkit: cost analysis, reparameterization and toy training.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler: Callable[[argparse.Namespace], int], help_text: str) -> Any:
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    describe = add("describe", cmd_describe, "print stem, stages and parameter totals")
    describe.add_argument("--config", required=True)

    flops = add("flops", cmd_flops, "count MACs and parameters")
    flops.add_argument("--config", required=True)
    flops.add_argument("--input", type=extent, required=True, help="HxW")
    flops.add_argument("--per-layer", action="store_true")

    gradcheck = add("gradcheck", cmd_gradcheck, "check block gradients against finite differences")
    gradcheck.add_argument("--block", choices=GRADCHECK_BLOCKS, required=True)
    gradcheck.add_argument("--c1", type=int, required=True)
    gradcheck.add_argument("--c2", type=int, required=True)
    gradcheck.add_argument("--e", type=float, default=None)
    gradcheck.add_argument("--retain-gate", action="store_true")
    gradcheck.add_argument("--ced-t", type=int, choices=(1, 2), default=1)
    gradcheck.add_argument("--input", type=extent, default=(8, 8))
    gradcheck.add_argument("--tol", type=float, default=1e-5)

    fuse = add("fuse", cmd_fuse, "fuse RepDW pairs and save the deploy model")
    fuse.add_argument("--config", required=True)
    fuse.add_argument("--weights", type=Path, default=None)
    fuse.add_argument("--out", type=Path, required=True)
    fuse.add_argument("--verify", action="store_true")
    fuse.add_argument("--samples", type=int, default=100)
    fuse.add_argument("--tol", type=float, default=1e-4)

    bench = add("bench", cmd_bench, "time forward passes (informational)")
    bench.add_argument("--config", required=True)
    bench.add_argument("--input", type=extent, required=True)
    bench.add_argument("--iters", type=int, default=20)
    bench.add_argument("--warmup", type=int, default=3)
    bench.add_argument("--fused", action="store_true")

    train = add("train-toy", cmd_train_toy, "train a toy classifier on synthetic bars")
    train.add_argument("--block", choices=[kind.value for kind in TOY_BLOCK_KINDS], required=True)
    train.add_argument("--expansion", type=float, required=True)
    train.add_argument("--steps", type=int, required=True)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--schedule", choices=("constant", "flat_cosine"), default="constant")
    train.add_argument("--samples", type=int, default=None)

    rank = add("rank", cmd_rank, "rank of the quadratic terms of a multiplication")
    rank.add_argument("--dim", type=int, required=True)
    rank.add_argument("--samples", type=int, required=True)
    rank.add_argument("--tol", type=float, default=1e-8)

    sweep = add("sweep", cmd_sweep, "MACs of ConvFFN vs Multiplication across expansions")
    sweep.add_argument("--c", type=int, required=True)
    sweep.add_argument("--input", type=extent, required=True)
    sweep.add_argument("--e", type=float, action="append")
    sweep.add_argument("--oracle", action="store_true")

    ratios = add("ratios", cmd_ratios, "cost of stage ratios and CED expansion placements")
    ratios.add_argument("--config", required=True)
    ratios.add_argument("--input", type=extent, default=(64, 64))
    ratios.add_argument("--ratio", type=ratio, action="append")

    init = add("init", cmd_init, "save a seeded random model")
    init.add_argument("--config", required=True)
    init.add_argument("--out", type=Path, required=True)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    """Parse `argv`, run the subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    setup_logging(level="DEBUG" if args.verbose else settings.log_level, stream=sys.stderr)
    if args.threads < 1:
        sys.stderr.write(f"remdet: error: --threads must be at least 1, got {args.threads}\n")
        return EXIT_USAGE
    set_num_threads(args.threads)

    try:
        code: int = args.handler(args)
    except CheckFailed as e:
        logger.error(str(e))
        return EXIT_CHECK_FAILED
    except DivergedLossError as e:
        sys.stderr.write(f"remdet: check failed: {e}\n")
        return EXIT_CHECK_FAILED
    except (RemdetError, ValueError, OSError) as e:
        reason = str(e).splitlines()[0] if str(e) else type(e).__name__
        sys.stderr.write(f"remdet: error: {reason}\n")
        return EXIT_USAGE
    except Exception:
        logger.exception(f"Unexpected failure in {args.command}")
        return EXIT_USAGE
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
