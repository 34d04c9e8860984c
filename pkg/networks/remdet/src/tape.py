"""Reverse-mode gradient tape.

Ops record a node whenever one of their inputs is tracked by the active tape.
Nodes are appended in execution order, which is a topological order of the
computation, so a single reverse sweep visits every node exactly once.
"""

from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from networks.remdet.src.errors import TapeCorruptError
from networks.remdet.src.tensor import Array, Tensor

Backward = Callable[["TapeNode", Array], Sequence[Array | None]]


@dataclass
class TapeNode:
    """One recorded op: its inputs, output, VJP and whatever it saved for it."""

    op: str
    inputs: tuple[Tensor | None, ...]
    output: Tensor
    backward: Backward
    saved: dict[str, Any] = field(default_factory=dict)
    index: int = -1


_ACTIVE_TAPE: ContextVar["GradTape | None"] = ContextVar("remdet_active_tape", default=None)


class GradTape:
    """Single-owner record of executed ops.

    Usage::

        with GradTape() as tape:
            tape.watch(x)
            y = some_op(x)
        (gx,) = tape.gradient(y, [x])
    """

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        # id -> tensor; holding the tensor keeps its id from being reused
        self._tracked: dict[int, Tensor] = {}
        self._producers: dict[int, TapeNode] = {}
        self._token: Any = None

    def __enter__(self) -> "GradTape":
        if self._token is not None:
            raise TapeCorruptError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def watch(self, *tensors: Tensor) -> None:
        """Mark tensors as differentiation sources."""
        for tensor in tensors:
            self._tracked[id(tensor)] = tensor

    def is_tracked(self, tensor: Tensor | None) -> bool:
        return tensor is not None and id(tensor) in self._tracked

    def record(
        self,
        op: str,
        inputs: tuple[Tensor | None, ...],
        output: Tensor,
        backward: Backward,
        saved: dict[str, Any],
    ) -> TapeNode | None:
        if not any(self.is_tracked(tensor) for tensor in inputs):
            return None
        node = TapeNode(
            op=op,
            inputs=inputs,
            output=output,
            backward=backward,
            saved=saved,
            index=len(self.nodes),
        )
        self.nodes.append(node)
        self._tracked[id(output)] = output
        self._producers[id(output)] = node
        return node

    def node_for(self, tensor: Tensor) -> TapeNode:
        """The node that produced `tensor` on this tape."""
        node = self._producers.get(id(tensor))
        if node is None:
            raise TapeCorruptError(f"{tensor!r} was not produced on this tape")
        return node

    def gradient(
        self,
        target: Tensor,
        sources: Sequence[Tensor],
        grad_target: Tensor | None = None,
    ) -> list[Tensor]:
        """Vector-Jacobian product of `target` with respect to each source.

        Args:
            target: Tensor produced (or watched) on this tape
            sources: Tensors to differentiate with respect to
            grad_target: Cotangent for `target`; ones when omitted

        Returns:
            One gradient per source; zeros where no path connects them

        """
        if not self.is_tracked(target):
            raise TapeCorruptError(f"target {target!r} is not tracked by this tape")
        seed = np.ones_like(target.numpy()) if grad_target is None else grad_target.numpy()
        if seed.shape != target.numpy().shape:
            raise TapeCorruptError(
                f"cotangent shape {seed.shape} does not match target shape {target.shape}"
            )
        grads: dict[int, Array] = {id(target): seed}
        stop = self._producers[id(target)].index if id(target) in self._producers else -1
        for node in reversed(self.nodes[: stop + 1]):
            grad_out = grads.get(id(node.output))
            if grad_out is None:
                continue
            input_grads = node.backward(node, grad_out)
            if len(input_grads) != len(node.inputs):
                raise TapeCorruptError(
                    f"{node.op} backward returned {len(input_grads)} gradients "
                    f"for {len(node.inputs)} inputs"
                )
            for tensor, grad in zip(node.inputs, input_grads, strict=True):
                if grad is None or tensor is None or not self.is_tracked(tensor):
                    continue
                if grad.shape != tensor.shape:
                    raise TapeCorruptError(
                        f"{node.op} produced gradient of shape {grad.shape} "
                        f"for input of shape {tensor.shape}"
                    )
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad
        return [
            Tensor(np.asarray(grads[id(source)], dtype=source.numpy().dtype))
            if id(source) in grads
            else Tensor(np.zeros_like(source.numpy()))
            for source in sources
        ]


def active_tape() -> GradTape | None:
    return _ACTIVE_TAPE.get()


def record(
    op: str,
    inputs: tuple[Tensor | None, ...],
    output: Tensor,
    backward: Backward,
    **saved: Any,
) -> TapeNode | None:
    """Record an op on the active tape, if any input is tracked there."""
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return None
    return tape.record(op, inputs, output, backward, saved)


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording, e.g. for evaluation passes inside a training step."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)
