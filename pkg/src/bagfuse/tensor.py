"""Dense float tensors with reverse-mode automatic differentiation.

Operations execute eagerly on numpy arrays.  While a tape is active (see
``new_tape``), every differentiable op appends a record holding its backward
rule; ``backward`` replays the active tape in exact reverse execution order,
accumulating gradients additively into every tensor that requires them.

Working precision is float32.  Tensors may be created as float64 where extra
headroom matters (numeric gradient checks, scalar optimizer probes); ops
follow the dtype of their inputs.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, LabelError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "OpRecord",
    "new_tape",
    "no_grad",
    "active_tape",
    "record_op",
    "accumulate_grad",
    "backward",
    "conv2d",
    "linear",
    "silu",
    "relu",
    "global_avg_pool",
    "log_softmax",
    "nll_loss",
    "concat",
    "tensor_sum",
    "gradient_check",
    "GradientCheckReport",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense float array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
        self.data: np.ndarray = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class OpRecord:
    """One executed op: kind, operands, result, and its backward rule."""

    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], None]


class Tape:
    """Execution-ordered list of op records; backward walks it in reverse."""

    def __init__(self):
        self.records: list[OpRecord] = []

    def __len__(self) -> int:
        return len(self.records)


_state = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def new_tape():
    """Open a fresh tape; ops inside the block record onto it."""
    tape = Tape()
    _tape_stack().append(tape)
    try:
        yield tape
    finally:
        _tape_stack().pop()


@contextmanager
def no_grad():
    """Disable recording; useful for evaluation and frozen submodels."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def record_op(op: str, inputs: tuple, output: Tensor, backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Append a backward rule to the active tape when recording applies.

    Recording happens only when a tape is active, gradients are enabled, and
    at least one input requires a gradient; the output is then marked as
    requiring one too.
    """
    tape = active_tape()
    if tape is not None and _grad_enabled() and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.records.append(OpRecord(op, inputs, output, backward_fn))
    return output


def accumulate_grad(t: Tensor, g) -> None:
    """Add ``g`` into ``t.grad`` (allocated lazily); no-op without requires_grad."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Populate gradients of every tensor the scalar ``loss`` depends on."""
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")
    tape = active_tape()
    if tape is None:
        raise ContractError("backward requires an active tape")
    if not loss.requires_grad:
        raise ContractError("loss was not produced on the active tape")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue  # not on any path from the loss
        rec.backward(g)


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        out = Tensor(a.data + b.data)

        def bw(g):
            accumulate_grad(a, g)
            accumulate_grad(b, g)

        return record_op("add", (a, b), out, bw)

    c = float(b)
    out = Tensor(a.data + c)
    return record_op("add", (a,), out, lambda g: accumulate_grad(a, g))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        out = Tensor(a.data * b.data)

        def bw(g):
            accumulate_grad(a, g * b.data)
            accumulate_grad(b, g * a.data)

        return record_op("mul", (a, b), out, bw)

    c = float(b)
    out = Tensor(a.data * c)
    return record_op("mul", (a,), out, lambda g: accumulate_grad(a, g * c))


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    return record_op("sum", (x,), out, lambda g: accumulate_grad(x, g))


def silu(x: Tensor) -> Tensor:
    """Elementwise x * sigmoid(x)."""
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    s[~pos] = e / (1.0 + e)
    out = Tensor(xd * s)

    def bw(g):
        accumulate_grad(x, g * (s * (1.0 + xd * (1.0 - s))))

    return record_op("silu", (x,), out, bw)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def bw(g):
        accumulate_grad(x, g * (x.data > 0))

    return record_op("relu", (x,), out, bw)


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding (no kernel flip).

    x: [B, Cin, H, W]; weight: [Cout, Cin, kh, kw]; bias: [Cout].
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4D, got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4D, got shape {weight.shape}")
    b_sz, cin, h, w = x.shape
    cout, cw, kh, kw = weight.shape
    if cw != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {cw}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if kh < 1 or kw < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad geometry kernel={kh}x{kw} stride={stride} padding={padding}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: non-positive output size {oh}x{ow}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # [B*OH*OW, Cin*kh*kw] patch matrix; one GEMM does the whole batch
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b_sz * oh * ow, cin * kh * kw)
    w2 = weight.data.reshape(cout, -1)
    out_mat = cols @ w2.T + bias.data
    out = Tensor(out_mat.reshape(b_sz, oh, ow, cout).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b_sz * oh * ow, cout)
        if weight.requires_grad:
            accumulate_grad(weight, (g2.T @ cols).reshape(weight.shape))
        if bias.requires_grad:
            accumulate_grad(bias, g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(b_sz, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += gcols[:, :, :, :, u, v]
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            accumulate_grad(x, gxp)

    return record_op("conv2d", (x, weight, bias), out, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """out[b, o] = sum_f weight[o, f] * x[b, f] + bias[o]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear: need 2D input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: inner dims differ ({x.shape[1]} vs {weight.shape[1]})")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = Tensor(x.data @ weight.data.T + bias.data)

    def bw(g):
        if x.requires_grad:
            accumulate_grad(x, g @ weight.data)
        if weight.requires_grad:
            accumulate_grad(weight, g.T @ x.data)
        if bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=0))

    return record_op("linear", (x, weight, bias), out, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims: [B, C, H, W] -> [B, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4D, got {x.shape}")
    _, _, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bw(g):
        accumulate_grad(x, g[:, :, None, None] * (1.0 / (h * w)))

    return record_op("global_avg_pool", (x,), out, bw)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax, stabilized by subtracting the row max."""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"log_softmax: input must be [B, K], got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = Tensor(z - lse)
    sm = np.exp(out.data)

    def bw(g):
        accumulate_grad(x, g - sm * g.sum(axis=1, keepdims=True))

    return record_op("log_softmax", (x,), out, bw)


def nll_loss(log_probs: Tensor, targets) -> Tensor:
    """Mean over the batch of -log_probs[b, targets[b]]."""
    if log_probs.data.ndim != 2:
        raise ShapeError(f"nll_loss: log_probs must be [B, K], got {log_probs.shape}")
    b_sz, k = log_probs.shape
    t = np.asarray(targets)
    if t.ndim != 1 or len(t) != b_sz:
        raise ShapeError(f"nll_loss: expected {b_sz} targets, got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise LabelError(f"nll_loss: targets must be integers, got dtype {t.dtype}")
    if ((t < 0) | (t >= k)).any():
        bad = int(t[(t < 0) | (t >= k)][0])
        raise LabelError(f"nll_loss: label {bad} outside [0, {k})")
    rows = np.arange(b_sz)
    out = Tensor(np.asarray(-log_probs.data[rows, t].mean(), dtype=log_probs.dtype))

    def bw(g):
        gx = np.zeros_like(log_probs.data)
        gx[rows, t] = -float(np.asarray(g).ravel()[0]) / b_sz
        accumulate_grad(log_probs, gx)

    return record_op("nll_loss", (log_probs,), out, bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate 2D tensors along the feature axis (batch sizes must agree)."""
    if not tensors:
        raise ContractError("concat: empty tensor list")
    if axis != 1:
        raise ContractError("concat: only the feature axis (1) is supported")
    b_sz = tensors[0].shape[0]
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeError(f"concat: tensors must be 2D, got {t.shape}")
        if t.shape[0] != b_sz:
            raise ShapeError(f"concat: batch sizes differ ({b_sz} vs {t.shape[0]})")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            accumulate_grad(t, g[:, lo:hi])

    return record_op("concat", tuple(tensors), out, bw)


# ---------------------------------------------------------------------------
# numeric gradient verification


@dataclass(frozen=True)
class GradientCheckReport:
    max_rel_error: float
    tolerance: float
    step: float
    passed: bool


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3, tol: float = 1e-4) -> GradientCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` against central differences.

    The check runs in float64 regardless of the input dtype (float32 rounding
    noise alone would swamp the tolerance).  The reported error is
    max |analytic - numeric| scaled by the largest gradient magnitude.
    """
    x64 = Tensor(np.asarray(x.data, dtype=np.float64).copy(), requires_grad=True, dtype=np.float64)
    with new_tape():
        y = f(x64)
        if not isinstance(y, Tensor) or y.data.size != 1:
            raise ContractError("gradient_check requires a scalar-valued function")
        backward(y)
    analytic = x64.grad.copy() if x64.grad is not None else np.zeros_like(x64.data)

    numeric = np.zeros_like(analytic)
    flat = x64.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x64).item()
            flat[i] = orig - h
            fm = f(x64).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)

    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-8)
    max_rel = float(np.abs(analytic - numeric).max(initial=0.0)) / scale
    return GradientCheckReport(max_rel_error=max_rel, tolerance=tol, step=h, passed=max_rel < tol)
