"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records itself on a module-level tape; the
tape is replayed in exact reverse execution order by ``backward``.  Arrays
are plain numpy buffers, float32 by default with a float64 mode used by the
gradient checker.  Shapes are only as general as the denoising network
needs: elementwise ops broadcast numpy-style, ``matmul`` broadcasts over
leading batch axes, reductions act on the last axis.

Any operation that produces a non-finite value raises ``NumericsError``
naming the op, so a diverging training step fails loudly instead of
propagating NaNs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NumericsError",
    "Tensor",
    "GradientTape",
    "tape",
    "no_grad",
    "default_dtype",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "concat_last",
    "split_last",
    "slice_last",
    "reshape",
    "transpose",
    "softmax_last",
    "log_softmax_last",
    "layer_norm",
    "gelu",
    "embedding",
    "gather_last",
    "mse",
    "tsum",
    "sum_last",
    "masked_fill",
    "dropout",
]


class NumericsError(RuntimeError):
    """Shape mismatch, non-finite value, or tape misuse."""


_DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for tensors built from raw data."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise NumericsError(f"unsupported tensor dtype {dtype!r}")
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dtype
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    """A dense real array, optionally tracked for gradients.

    ``data`` is immutable by convention once the tensor has entered the
    graph; only ``grad`` buffers are written after creation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape_gen")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise NumericsError("cannot wrap a Tensor in a Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape_gen: int | None = None  # set when produced by a taped op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape_gen is None

    def detach(self) -> "Tensor":
        """A view of the same data, cut loose from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class GradientTape:
    """Ordered record of executed operations.

    Each record holds the op name, the input tensors, the output tensor and
    a closure mapping the output gradient to per-input gradients.  Backward
    traverses records strictly in reverse execution order and accumulates
    (never overwrites) gradient contributions.
    """

    def __init__(self):
        self._records: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []
        self.generation = 0
        self.enabled = True

    def __len__(self) -> int:
        return len(self._records)

    def record(self, name, inputs, output, backward_fn) -> None:
        self._records.append((name, inputs, output, backward_fn))
        output._tape_gen = self.generation

    def clear(self) -> None:
        self._records.clear()
        self.generation += 1


tape = GradientTape()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference, stop-gradient pre-passes)."""
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


def _finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"op '{name}' produced non-finite values")
    return arr


def _apply(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap an op result, recording it when gradients are being tracked."""
    out = Tensor.__new__(Tensor)
    out.data = _finite(name, out_data)
    out.grad = None
    out._tape_gen = None
    out.requires_grad = False
    if tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(name, tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate gradients of all reachable leaves of a scalar loss.

    The tape is consumed: records are traversed newest-first, each leaf's
    gradient is the accumulated sum of its contributions, and the tape is
    cleared afterwards.
    """
    if loss.data.size != 1:
        raise NumericsError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss._tape_gen != tape.generation or not loss.requires_grad:
        raise NumericsError("loss is not on the active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for name, inputs, output, backward_fn in reversed(tape._records):
        out_grad = grads.pop(id(output), None)
        if out_grad is None:
            continue
        input_grads = backward_fn(out_grad)
        for tensor, grad in zip(inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if not np.all(np.isfinite(grad)):
                raise NumericsError(f"op '{name}' produced a non-finite gradient")
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
            if tensor.is_leaf:
                leaves[key] = tensor
    for key, tensor in leaves.items():
        contribution = grads[key].astype(tensor.data.dtype, copy=False)
        if tensor.grad is None:
            tensor.grad = contribution.copy()
        else:
            tensor.grad = tensor.grad + contribution
    tape.clear()


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, broadcasting over leading batch axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise NumericsError(
            f"matmul needs >=2-d operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise NumericsError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def backward_fn(grad):
        ga = _unbroadcast(np.matmul(grad, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), grad), b.data.shape)
        return ga, gb

    return _apply("matmul", (a, b), out, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting (bias rows, masks, noise)."""
    try:
        out = a.data + b.data
    except ValueError:
        raise NumericsError(f"add shape mismatch: {a.data.shape} + {b.data.shape}") from None

    def backward_fn(grad):
        return _unbroadcast(grad, a.data.shape), _unbroadcast(grad, b.data.shape)

    return _apply("add", (a, b), out, backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise NumericsError(f"sub shape mismatch: {a.data.shape} - {b.data.shape}") from None

    def backward_fn(grad):
        return _unbroadcast(grad, a.data.shape), _unbroadcast(-grad, b.data.shape)

    return _apply("sub", (a, b), out, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    try:
        out = a.data * b.data
    except ValueError:
        raise NumericsError(f"mul shape mismatch: {a.data.shape} * {b.data.shape}") from None

    def backward_fn(grad):
        return (
            _unbroadcast(grad * b.data, a.data.shape),
            _unbroadcast(grad * a.data, b.data.shape),
        )

    return _apply("mul", (a, b), out, backward_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    factor = float(factor)
    out = a.data * factor

    def backward_fn(grad):
        return (grad * factor,)

    return _apply("scale", (a,), out, backward_fn)


def concat_last(tensors: Iterable[Tensor]) -> Tensor:
    """Concatenate along the last dimension."""
    tensors = tuple(tensors)
    if not tensors:
        raise NumericsError("concat_last of zero tensors")
    lead = tensors[0].data.shape[:-1]
    for t in tensors[1:]:
        if t.data.shape[:-1] != lead:
            raise NumericsError(
                "concat_last leading-shape mismatch: "
                + " vs ".join(str(t.data.shape) for t in tensors)
            )
    out = np.concatenate([t.data for t in tensors], axis=-1)
    sizes = [t.data.shape[-1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(grad):
        return tuple(grad[..., offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _apply("concat_last", tensors, out, backward_fn)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of the last dimension."""
    size = a.data.shape[-1]
    if not (0 <= start < stop <= size):
        raise NumericsError(f"slice_last [{start}:{stop}] out of range for last dim {size}")
    out = a.data[..., start:stop]

    def backward_fn(grad):
        full = np.zeros_like(a.data)
        full[..., start:stop] = grad
        return (full,)

    return _apply("slice_last", (a,), out, backward_fn)


def split_last(a: Tensor, parts: int) -> tuple[Tensor, ...]:
    """Split the last dimension into `parts` equal slices."""
    size = a.data.shape[-1]
    if parts < 1 or size % parts != 0:
        raise NumericsError(f"cannot split last dim {size} into {parts} equal parts")
    width = size // parts
    return tuple(slice_last(a, i * width, (i + 1) * width) for i in range(parts))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def backward_fn(grad):
        return (grad.reshape(a.data.shape),)

    return _apply("reshape", (a,), out, backward_fn)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward_fn(grad):
        return (np.transpose(grad, inverse),)

    return _apply("transpose", (a,), out, backward_fn)


def softmax_last(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last dimension."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=-1, keepdims=True)

    def backward_fn(grad):
        inner = (grad * out).sum(axis=-1, keepdims=True)
        return (out * (grad - inner),)

    return _apply("softmax_last", (a,), out, backward_fn)


def log_softmax_last(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_z

    def backward_fn(grad):
        return (grad - np.exp(out) * grad.sum(axis=-1, keepdims=True),)

    return _apply("log_softmax_last", (a,), out, backward_fn)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance.

    Affine gain and bias are composed outside via ``mul``/``add`` so the
    normalization backward stays self-contained.
    """
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out = centered * inv_std

    def backward_fn(grad):
        k = a.data.shape[-1]
        grad_mean = grad.mean(axis=-1, keepdims=True)
        proj = (grad * out).mean(axis=-1, keepdims=True)
        return (inv_std * (grad - grad_mean - out * proj),)

    return _apply("layer_norm", (a,), out, backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GeLU activation, tanh approximation (matches the gradient checker)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward_fn(grad):
        sech2 = 1.0 - th * th
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (grad * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner),)

    return _apply("gelu", (a,), out, backward_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer ids; backward scatter-adds."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise NumericsError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise NumericsError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]"
        )
    out = table.data[ids]

    def backward_fn(grad):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, grad)
        return (acc,)

    return _apply("embedding", (table,), out, backward_fn)


def gather_last(a: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one entry per row from the last dimension (e.g. target log-probs)."""
    ids = np.asarray(ids)
    if ids.shape != a.data.shape[:-1]:
        raise NumericsError(
            f"gather_last ids shape {ids.shape} must match leading dims {a.data.shape[:-1]}"
        )
    out = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def backward_fn(grad):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, ids[..., None], grad[..., None], axis=-1)
        return (full,)

    return _apply("gather_last", (a,), out, backward_fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of elementwise squared error over all elements (scalar)."""
    if a.data.shape != b.data.shape:
        raise NumericsError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    out = np.asarray((diff * diff).mean(), dtype=a.data.dtype)
    coeff = 2.0 / diff.size

    def backward_fn(grad):
        g = grad * coeff * diff
        return g, -g

    return _apply("mse", (a, b), out, backward_fn)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements (scalar)."""
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward_fn(grad):
        return (np.broadcast_to(grad, a.data.shape).copy(),)

    return _apply("sum", (a,), out, backward_fn)


def sum_last(a: Tensor, keepdims: bool = True) -> Tensor:
    out = a.data.sum(axis=-1, keepdims=keepdims)

    def backward_fn(grad):
        if not keepdims:
            grad = grad[..., None]
        return (np.broadcast_to(grad, a.data.shape).copy(),)

    return _apply("sum_last", (a,), out, backward_fn)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Set masked entries to a constant; gradient is blocked there."""
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data)
    except ValueError:
        raise NumericsError(
            f"masked_fill mask shape {mask.shape} does not broadcast to {a.data.shape}"
        ) from None

    def backward_fn(grad):
        return (np.where(mask, 0.0, grad),)

    return _apply("masked_fill", (a,), out, backward_fn)


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when `rate` is 0 or not training."""
    if not 0.0 <= rate < 1.0:
        raise NumericsError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    factor = 1.0 / (1.0 - rate)
    out = a.data * keep * factor

    def backward_fn(grad):
        return (grad * keep * factor,)

    return _apply("dropout", (a,), out, backward_fn)
