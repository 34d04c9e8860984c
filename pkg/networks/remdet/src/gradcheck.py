"""Finite-difference verification of block gradients."""

import numpy as np

from networks.remdet.src.blocks import (
    BlockModule,
    assign_tensor,
    block_io,
    build_block,
    named_tensors,
    tensor_at,
)
from networks.remdet.src.ops import ew_mul, finite_diff
from networks.remdet.src.tape import GradTape, no_tape
from networks.remdet.src.tensor import Array, Tensor
from shared.models import BlockCfg, DType, GradcheckEntry, GradcheckReport
from shared.monitoring import get_logger

logger = get_logger(__name__)

GRADCHECK_TOL = 1e-5
STEP_SCALE = 1e-6
REL_FLOOR = 1e-12


def randomize_batchnorm(tree: object, rng: np.random.Generator) -> None:
    """Give every batch norm of a parameter tree non-trivial statistics.

    Freshly initialized BNs are identities, which would hide errors in their VJPs.
    """
    for name, _ in list(named_tensors(tree)):
        leaf = name.rsplit(".", 1)[-1]
        tensor = tensor_at(tree, name)
        shape = tensor.shape
        if leaf in ("gamma", "running_var"):
            values = rng.uniform(0.5, 1.5, shape)
        elif leaf in ("beta", "running_mean"):
            values = rng.normal(0.0, 0.1, shape)
        else:
            continue
        assign_tensor(tree, name, Tensor(values.astype(tensor.numpy().dtype)))


def relative_error(tape_grad: Array, fd_grad: Array) -> tuple[float, float]:
    """(max abs error, max abs error scaled by the larger gradient magnitude)."""
    abs_err = float(np.max(np.abs(tape_grad - fd_grad)))
    scale = max(float(np.max(np.abs(fd_grad))), float(np.max(np.abs(tape_grad))), REL_FLOOR)
    return abs_err, abs_err / scale


def _steps(x: Tensor) -> Array:
    return STEP_SCALE * (1.0 + np.abs(x.numpy()))


def gradcheck_block(
    cfg: BlockCfg,
    seed: int = 0,
    *,
    batch: int = 2,
    input_hw: tuple[int, int] = (8, 8),
    tol: float = GRADCHECK_TOL,
) -> GradcheckReport:
    """Compare tape gradients of a block against central differences in f64.

    The probe loss is sum(block(x) * p) for a fixed random p, so the tape is
    seeded with p directly. The input and every trainable tensor are checked;
    batch norms run on their (randomized) running statistics.
    """
    module = build_block(cfg, seed, dtype=DType.F64)
    rng = np.random.default_rng(seed + 1)
    randomize_batchnorm(module.params, rng)
    height, width = input_hw
    x = Tensor.randn((batch, block_io(cfg)[0], height, width), rng, DType.F64)
    with no_tape():
        probe = Tensor.randn(module.forward(x).shape, rng, DType.F64)

    names = [name for name, _ in module.named_tensors(trainable_only=True)]
    sources = [x, *(tensor_at(module.params, name) for name in names)]
    with GradTape() as tape:
        tape.watch(*sources)
        out = module.forward(x)
    tape_grads = tape.gradient(out, sources, grad_target=probe)

    def loss(inp: Tensor) -> float:
        with no_tape():
            return float(ew_mul(module.forward(inp), probe).numpy().sum())

    entries = [_entry("input", tape_grads[0], finite_diff(loss, x, _steps(x)), tol)]
    for name, source, grad in zip(names, sources[1:], tape_grads[1:], strict=True):
        entries.append(_entry(name, grad, _param_fd(module, name, source, x, probe), tol))
    report = GradcheckReport(block=cfg.kind, tol=tol, entries=entries)
    worst = report.worst
    logger.info(
        f"Gradcheck {cfg.kind}: {len(entries)} tensors, worst {worst.name} "
        f"rel={worst.rel_err:.2e} passed={report.passed}"
    )
    return report


def _param_fd(module: BlockModule, name: str, value: Tensor, x: Tensor, probe: Tensor) -> Tensor:
    def loss(candidate: Tensor) -> float:
        assign_tensor(module.params, name, candidate)
        try:
            with no_tape():
                return float(ew_mul(module.forward(x), probe).numpy().sum())
        finally:
            assign_tensor(module.params, name, value)

    return finite_diff(loss, value, _steps(value))


def _entry(name: str, tape_grad: Tensor, fd_grad: Tensor, tol: float) -> GradcheckEntry:
    abs_err, rel_err = relative_error(tape_grad.numpy(), fd_grad.numpy())
    if rel_err > tol:
        logger.debug(f"Gradcheck mismatch at {name}: abs={abs_err:.3e} rel={rel_err:.3e}")
    return GradcheckEntry(name=name, max_abs_err=abs_err, rel_err=rel_err, passed=rel_err <= tol)

