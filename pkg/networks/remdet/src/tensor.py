"""Dense tensor type and batch-norm parameter container."""

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import numpy.typing as npt

from networks.remdet.src.config import settings
from networks.remdet.src.errors import (
    NonFiniteValueError,
    ShapeMismatchError,
    UnsupportedDTypeError,
)
from shared.models import DType, NormCfg

NUMPY_DTYPES: dict[DType, type[np.floating[Any]]] = {
    DType.F32: np.float32,
    DType.F64: np.float64,
}

Array = npt.NDArray[np.floating[Any]]


def to_numpy_dtype(dtype: DType | str) -> type[np.floating[Any]]:
    return NUMPY_DTYPES[DType(dtype)]


class Tensor:
    """Immutable dense array of rank 1..4 holding f32 or f64 scalars.

    Activations are laid out [N, C, H, W], row-major. The wrapped array is
    contiguous and read-only; every op returns a new tensor. Tensors compare by
    identity so a gradient tape can key on them.
    """

    __slots__ = ("_data",)

    def __init__(self, data: Array) -> None:
        if data.dtype not in (np.float32, np.float64):
            raise UnsupportedDTypeError(f"unsupported dtype {data.dtype}; expected f32 or f64")
        if not 1 <= data.ndim <= 4:
            raise ShapeMismatchError(f"rank {data.ndim} outside 1..4")
        if any(extent <= 0 for extent in data.shape):
            raise ShapeMismatchError(f"shape {data.shape} has a non-positive extent")
        array = np.ascontiguousarray(data)
        array.flags.writeable = False
        self._data = array

    @classmethod
    def from_data(
        cls,
        values: Any,
        dtype: DType | str | None = None,
        *,
        strict: bool | None = None,
    ) -> "Tensor":
        """Copy external data into a new tensor.

        Args:
            values: Nested sequences or an array
            dtype: Target dtype; defaults to the configured default dtype
            strict: Reject NaN and infinities; defaults to the configured flag

        """
        target = to_numpy_dtype(dtype or settings.default_dtype)
        array = np.array(values, dtype=target, copy=True)
        if strict if strict is not None else settings.strict_tensors:
            if not np.all(np.isfinite(array)):
                raise NonFiniteValueError("tensor data contains NaN or infinite values")
        return cls(array)

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype: DType | str = DType.F32) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=to_numpy_dtype(dtype)))

    @classmethod
    def full(cls, shape: Sequence[int], value: float, dtype: DType | str = DType.F32) -> "Tensor":
        return cls(np.full(tuple(shape), value, dtype=to_numpy_dtype(dtype)))

    @classmethod
    def randn(
        cls,
        shape: Sequence[int],
        rng: np.random.Generator,
        dtype: DType | str = DType.F32,
        scale: float = 1.0,
    ) -> "Tensor":
        """Standard normal samples scaled by `scale`, drawn in f64 then cast."""
        samples = rng.standard_normal(tuple(shape)) * scale
        return cls(samples.astype(to_numpy_dtype(dtype)))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self._data.shape)

    @property
    def dtype(self) -> DType:
        return DType.F32 if self._data.dtype == np.float32 else DType.F64

    @property
    def ndim(self) -> int:
        return int(self._data.ndim)

    @property
    def size(self) -> int:
        return int(self._data.size)

    def numpy(self) -> Array:
        """Read-only view of the underlying array."""
        return self._data

    def astype(self, dtype: DType | str) -> "Tensor":
        target = to_numpy_dtype(dtype)
        if self._data.dtype == target:
            return self
        return Tensor(self._data.astype(target))

    def tolist(self) -> Any:
        return self._data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.value})"


def _vector(tensor: Tensor, name: str) -> None:
    if tensor.ndim != 1:
        raise ShapeMismatchError(f"{name} must be a vector, got shape {tensor.shape}")


@dataclass
class BatchNormParams:
    """Per-channel batch-norm state.

    gamma and beta are trainable; the running statistics are updated by
    `batchnorm_train` and are never touched by the optimizer.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor = field(metadata={"trainable": False})
    running_var: Tensor = field(metadata={"trainable": False})
    eps: float = 1e-3
    momentum: float = 0.03

    def __post_init__(self) -> None:
        for name in ("gamma", "beta", "running_mean", "running_var"):
            _vector(getattr(self, name), name)
        vectors = (self.gamma, self.beta, self.running_mean, self.running_var)
        shapes = {vector.shape for vector in vectors}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"batch-norm vectors disagree in length: {sorted(shapes)}")
        dtypes = {vector.dtype for vector in vectors}
        if len(dtypes) != 1:
            raise ShapeMismatchError("batch-norm vectors disagree in dtype")
        if np.any(self.running_var.numpy() < 0):
            raise ValueError("running_var entries must be non-negative")
        # eps == 0 is accepted so exact identities can be expressed
        if self.eps < 0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")
        if not 0 < self.momentum <= 1:
            raise ValueError(f"momentum must lie in (0, 1], got {self.momentum}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def dtype(self) -> DType:
        return self.gamma.dtype

    @classmethod
    def identity(
        cls,
        channels: int,
        dtype: DType | str = DType.F32,
        norm: NormCfg | None = None,
    ) -> "BatchNormParams":
        """gamma=1, beta=0, mean=0, var=1: the freshly initialized state."""
        norm = norm or NormCfg()
        return cls(
            gamma=Tensor.full((channels,), 1.0, dtype),
            beta=Tensor.zeros((channels,), dtype),
            running_mean=Tensor.zeros((channels,), dtype),
            running_var=Tensor.full((channels,), 1.0, dtype),
            eps=norm.eps,
            momentum=norm.momentum,
        )

    def astype(self, dtype: DType | str) -> "BatchNormParams":
        return BatchNormParams(
            gamma=self.gamma.astype(dtype),
            beta=self.beta.astype(dtype),
            running_mean=self.running_mean.astype(dtype),
            running_var=self.running_var.astype(dtype),
            eps=self.eps,
            momentum=self.momentum,
        )
