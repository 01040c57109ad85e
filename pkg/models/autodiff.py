# models/autodiff.py - Differentiable primitives over real64 tensors
"""
Reverse-mode differentiation for every operation the model needs.

Values live in ``torch.float64`` tensors and torch's autograd graph is the
recording tape.  This module adds what the model relies on beyond plain
torch: a fixed primitive set with shape validation that names the failing
primitive, an optional :class:`Tape` log of recorded primitives (with parent
handles) that can also stop on the first non-finite value, the scalar-loss
contract of :func:`backward`, and the central-difference checker
:func:`check_gradient` used throughout the test-suite.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.weak import WeakTensorKeyDictionary

from .errors import GaotError, NonFiniteError, ShapeError

DTYPE = torch.float64

# A DiffTensor is a float64 torch tensor; requires_grad marks it as taped.
DiffTensor = torch.Tensor


def diff_tensor(values, requires_grad: bool = True) -> DiffTensor:
    """Create a real64 leaf tensor that collects gradients"""
    t = torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE).clone()
    return t.requires_grad_(requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TapeNode:
    index: int
    op: str
    parents: tuple[Optional[int], ...]
    output_shape: tuple[int, ...]


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Context that logs every primitive evaluated inside it.

    ``record_grad=False`` evaluates without building the autograd graph
    (taping disabled); ``check_finite=True`` raises :class:`NonFiniteError`
    naming the first primitive that produced a NaN or infinity.  Tapes are
    thread-local: concurrent samples each use their own.

    Only registered primitives are logged.  Layout helpers (stack,
    unsqueeze, permute) and constant Z-score shifts pass through unlogged.
    """

    def __init__(self, record_grad: bool = True, check_finite: bool = False):
        self.record_grad = record_grad
        self.check_finite = check_finite
        self.nodes: list[TapeNode] = []
        self._handles = WeakTensorKeyDictionary()
        self._grad_mode = None

    def __enter__(self) -> "Tape":
        self._grad_mode = torch.set_grad_enabled(self.record_grad)
        self._grad_mode.__enter__()
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        self._grad_mode.__exit__(exc_type, exc, tb)
        return False

    def handle(self, tensor: torch.Tensor) -> Optional[int]:
        return self._handles.get(tensor)

    def record(self, op: str, inputs: Sequence[torch.Tensor], output: torch.Tensor) -> TapeNode:
        parents = tuple(self.handle(t) if isinstance(t, torch.Tensor) else None for t in inputs)
        node = TapeNode(len(self.nodes), op, parents, tuple(output.shape))
        self.nodes.append(node)
        self._handles[output] = node.index
        return node


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------

_PRIMITIVES: dict[str, Callable[..., torch.Tensor]] = {}


def primitive(name: str):
    def register(fn):
        _PRIMITIVES[name] = fn
        return fn
    return register


def primitive_names() -> list[str]:
    return sorted(_PRIMITIVES)


def _shape_error(op: str, message: str, *tensors: torch.Tensor) -> ShapeError:
    shapes = ", ".join(str(tuple(t.shape)) for t in tensors)
    return ShapeError(f"{op}: {message} (shapes: {shapes})")


def primitive_forward(op: str, inputs: Sequence[torch.Tensor], **attrs) -> DiffTensor:
    """Evaluate primitive ``op`` on ``inputs`` and record it on the active tape"""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise GaotError(f"unknown primitive '{op}'") from None
    out = fn(*inputs, **attrs)
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out)
        if tape.check_finite and out.is_floating_point() and not torch.isfinite(out).all():
            raise NonFiniteError(f"non-finite value produced by primitive '{op}'")
    return out


def _broadcast(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _shape_error(op, "operands are not broadcastable", a, b) from None


@primitive("matmul")
def _matmul(a, b):
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise _shape_error("matmul", "inner dimensions differ", a, b)
    return torch.matmul(a, b)


@primitive("add")
def _add(a, b):
    _broadcast("add", a, b)
    return a + b


@primitive("sub")
def _sub(a, b):
    _broadcast("sub", a, b)
    return a - b


@primitive("mul")
def _mul(a, b):
    _broadcast("mul", a, b)
    return a * b


@primitive("div")
def _div(a, b):
    _broadcast("div", a, b)
    return a / b


@primitive("scale")
def _scale(a, *, factor: float):
    return a * factor


@primitive("concat")
def _concat(*tensors, axis: int = -1):
    ref = tensors[0]
    ax = axis % ref.dim()
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(
            t.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != ax
        ):
            raise _shape_error("concat", f"extents differ off axis {axis}", *tensors)
    return torch.cat(tensors, dim=ax)


@primitive("slice")
def _slice(a, *, axis: int, start: int, stop: int):
    if not 0 <= start <= stop <= a.shape[axis]:
        raise _shape_error("slice", f"range [{start}, {stop}) outside axis {axis}", a)
    return a.narrow(axis, start, stop - start)


@primitive("reshape")
def _reshape(a, *, shape: Sequence[int]):
    if math.prod(shape) != a.numel() and -1 not in shape:
        raise _shape_error("reshape", f"cannot view as {tuple(shape)}", a)
    return a.reshape(tuple(shape))


@primitive("transpose")
def _transpose(a, *, dim0: int, dim1: int):
    return a.transpose(dim0, dim1)


@primitive("sum")
def _sum(a, *, axis=None, keepdim: bool = False):
    return a.sum() if axis is None else a.sum(dim=axis, keepdim=keepdim)


@primitive("mean")
def _mean(a, *, axis=None, keepdim: bool = False):
    return a.mean() if axis is None else a.mean(dim=axis, keepdim=keepdim)


@primitive("exp")
def _exp(a):
    return torch.exp(a)


@primitive("ln")
def _ln(a):
    return torch.log(a)


@primitive("tanh")
def _tanh(a):
    return torch.tanh(a)


@primitive("gelu")
def _gelu(a):
    return F.gelu(a)


@primitive("relu")
def _relu(a):
    return torch.relu(a)


@primitive("softmax")
def _softmax(a, *, axis: int = -1):
    return torch.softmax(a, dim=axis)


@primitive("rsqrt")
def _rsqrt(a):
    return torch.rsqrt(a)


@primitive("gather")
def _gather(a, index):
    if index.dim() != 1:
        raise _shape_error("gather", "index must be one-dimensional", a, index)
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= a.shape[0]):
        raise _shape_error("gather", "row index out of range", a, index)
    return a.index_select(0, index)


@primitive("segment_sum")
def _segment_sum(a, offsets):
    if offsets.dim() != 1 or offsets.numel() < 1:
        raise _shape_error("segment_sum", "offsets must be a non-empty vector", a, offsets)
    if int(offsets[0]) != 0 or int(offsets[-1]) != a.shape[0]:
        raise _shape_error("segment_sum", "offsets must start at 0 and end at the row count", a, offsets)
    ids = segment_ids(offsets)
    out = a.new_zeros((offsets.numel() - 1,) + tuple(a.shape[1:]))
    return out.index_add(0, ids, a)


@primitive("dropout")
def _dropout(a, *, rate: float, generator: Optional[torch.Generator] = None, training: bool = True):
    if not 0.0 <= rate < 1.0:
        raise GaotError(f"dropout: rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = torch.empty_like(a).bernoulli_(1.0 - rate, generator=generator)
    return a * keep / (1.0 - rate)


@primitive("rotate_pairs")
def _rotate_pairs(a, cos, sin):
    if a.shape[-1] % 2:
        raise _shape_error("rotate_pairs", "last extent must be even", a, cos, sin)
    _broadcast("rotate_pairs", a[..., 0::2], cos)
    x0, x1 = a[..., 0::2], a[..., 1::2]
    rotated = torch.stack((x0 * cos - x1 * sin, x0 * sin + x1 * cos), dim=-1)
    return rotated.flatten(-2)


# ---------------------------------------------------------------------------
# Convenience wrappers used by the model code
# ---------------------------------------------------------------------------

def matmul(a, b): return primitive_forward("matmul", (a, b))
def add(a, b): return primitive_forward("add", (a, b))
def sub(a, b): return primitive_forward("sub", (a, b))
def mul(a, b): return primitive_forward("mul", (a, b))
def div(a, b): return primitive_forward("div", (a, b))
def scale(a, factor): return primitive_forward("scale", (a,), factor=factor)
def concat(tensors, axis=-1): return primitive_forward("concat", tuple(tensors), axis=axis)
def slice_(a, axis, start, stop): return primitive_forward("slice", (a,), axis=axis, start=start, stop=stop)
def reshape(a, shape): return primitive_forward("reshape", (a,), shape=shape)
def transpose(a, dim0, dim1): return primitive_forward("transpose", (a,), dim0=dim0, dim1=dim1)
def sum_(a, axis=None, keepdim=False): return primitive_forward("sum", (a,), axis=axis, keepdim=keepdim)
def mean(a, axis=None, keepdim=False): return primitive_forward("mean", (a,), axis=axis, keepdim=keepdim)
def exp(a): return primitive_forward("exp", (a,))
def ln(a): return primitive_forward("ln", (a,))
def tanh(a): return primitive_forward("tanh", (a,))
def gelu(a): return primitive_forward("gelu", (a,))
def relu(a): return primitive_forward("relu", (a,))
def softmax(a, axis=-1): return primitive_forward("softmax", (a,), axis=axis)
def rsqrt(a): return primitive_forward("rsqrt", (a,))
def rotate_pairs(a, cos, sin): return primitive_forward("rotate_pairs", (a, cos, sin))


def gather(a, index):
    return primitive_forward("gather", (a, torch.as_tensor(index, dtype=torch.long)))


def segment_sum(a, offsets):
    return primitive_forward("segment_sum", (a, torch.as_tensor(offsets, dtype=torch.long)))


def dropout(a, rate, generator=None, training=True):
    return primitive_forward("dropout", (a,), rate=rate, generator=generator, training=training)


def segment_ids(offsets) -> torch.Tensor:
    """Bucket index of every row described by monotone ``offsets``"""
    offsets = torch.as_tensor(offsets, dtype=torch.long)
    counts = offsets[1:] - offsets[:-1]
    return torch.repeat_interleave(torch.arange(counts.numel()), counts)


def segment_softmax(logits: torch.Tensor, offsets) -> torch.Tensor:
    """Softmax of ``logits`` taken separately inside every segment.

    Empty segments are allowed and simply own no rows.
    """
    offsets = torch.as_tensor(offsets, dtype=torch.long)
    ids = segment_ids(offsets)
    n_seg = offsets.numel() - 1
    with torch.no_grad():
        shift = logits.new_zeros(n_seg).scatter_reduce(
            0, ids, logits.detach(), reduce="amax", include_self=False
        )
    e = exp(sub(logits, gather(shift, ids)))
    totals = segment_sum(e, offsets)
    return div(e, gather(totals, ids))


# ---------------------------------------------------------------------------
# Backward pass and verification
# ---------------------------------------------------------------------------

def backward(loss: DiffTensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Gradients accumulate over repeated calls until the caller zeroes them.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise GaotError("backward: loss is not on the tape (no differentiable inputs)")
    loss.backward(retain_graph=retain_graph)


def check_gradient(
    f: Callable[[DiffTensor], DiffTensor],
    x: DiffTensor,
    h: float = 1e-6,
    components: Optional[Sequence[int]] = None,
    floor: float = 1e-12,
) -> float:
    """Largest relative gap between autograd and central differences.

    Returns max_i |analytic_i - numeric_i| / (|numeric_i| + floor) over the
    checked components of ``x`` (all of them unless ``components`` is given).
    """
    base = x.detach().clone().to(DTYPE)
    leaf = base.clone().requires_grad_(True)
    with Tape(check_finite=True):
        y = f(leaf)
    if y.numel() != 1:
        raise ShapeError(f"check_gradient: f must be scalar-valued, got shape {tuple(y.shape)}")
    if not torch.isfinite(y).all():
        raise NonFiniteError("check_gradient: f returned a non-finite value")
    (analytic,) = torch.autograd.grad(y.reshape(()), leaf, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(base)
    analytic = analytic.reshape(-1)

    flat = base.reshape(-1)
    indices = range(flat.numel()) if components is None else components
    worst = 0.0
    with Tape(record_grad=False, check_finite=True):
        for i in indices:
            plus, minus = flat.clone(), flat.clone()
            plus[i] += h
            minus[i] -= h
            numeric = (f(plus.view_as(base)).item() - f(minus.view_as(base)).item()) / (2.0 * h)
            err = abs(analytic[i].item() - numeric) / (abs(numeric) + floor)
            worst = max(worst, err)
    return worst
