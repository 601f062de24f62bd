"""Dense float64 kernels for the encoder forward pass.

Tensors are plain C-contiguous float64 numpy arrays (``shape`` plus a flat
row-major buffer). Every operation here is a pure function of its inputs and
keeps values finite. An optional multiply-accumulate counter can be armed
around a region of code (see :func:`count_macs`) to measure the exact number
of MACs executed by :func:`matmul`; it exists to validate the analytical
cost model against real executed shapes.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Iterator

import numpy as np

__all__ = [
    "DimensionError",
    "MacCounter",
    "as_tensor",
    "count_macs",
    "gelu",
    "gelu_erf",
    "layer_norm",
    "masked_softmax_rows",
    "matmul",
    "softmax_rows",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class MacCounter:
    """Accumulates multiply-accumulate counts from instrumented matmuls."""

    __slots__ = ("macs",)

    def __init__(self) -> None:
        self.macs = 0

    @property
    def flops(self) -> int:
        """FLOPs under the one-MAC-equals-two-FLOPs convention."""
        return 2 * self.macs


_active_counter: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar(
    "cpvit_mac_counter", default=None
)


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Arm a MAC counter for the duration of the with-block."""
    counter = MacCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def as_tensor(data, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 array; optionally reshape."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with shape validation and MAC instrumentation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} by {b.shape}"
        )
    counter = _active_counter.get()
    if counter is not None:
        counter.macs += a.shape[0] * a.shape[1] * b.shape[1]
    return a @ b


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilized by max-subtraction."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise DimensionError(f"softmax needs a nonempty last axis, got shape {a.shape}")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_rows(a: np.ndarray, column_mask: np.ndarray) -> np.ndarray:
    """Softmax over unmasked columns only; masked columns are exactly 0.

    With an all-ones mask this performs the same arithmetic as
    :func:`softmax_rows` and is bitwise identical to it.
    """
    a = np.asarray(a, dtype=np.float64)
    mask = np.asarray(column_mask)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise DimensionError(f"softmax needs a nonempty last axis, got shape {a.shape}")
    if mask.shape != (a.shape[-1],):
        raise DimensionError(
            f"column mask shape {mask.shape} does not match last axis of {a.shape}"
        )
    alive = mask != 0
    if not alive.any():
        raise ValueError("no surviving patches")
    if alive.all():
        return softmax_rows(a)
    sub = a[..., alive]
    shifted = sub - sub.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    out = np.zeros_like(a)
    out[..., alive] = probs
    return out


def layer_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = 1e-6,
) -> np.ndarray:
    """Per-row normalization to mean 0 / variance 1, then affine transform.

    Zero-variance rows normalize to 0 (the eps in the denominator), so the
    output of a constant row is exactly beta.
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm shapes disagree: x {x.shape}, gamma {gamma.shape}, "
            f"beta {beta.shape}"
        )
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    normed = (x - mean) / np.sqrt(var + eps)
    return normed * gamma + beta


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU activation, tanh approximation."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x**3)))


_erf = np.vectorize(math.erf, otypes=[np.float64])


def gelu_erf(x: np.ndarray) -> np.ndarray:
    """GELU activation, exact erf form (for parity with exported models)."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))
