"""Dense float64 tensors with tape-based reverse-mode differentiation.

The graph is recorded implicitly: while gradients are enabled, every op that
touches a tensor requiring grad appends one node to a module-level record.
Nodes are appended in execution order, so the record is topologically sorted
by construction; ``backward`` walks it once in reverse and then discards it.
The record is rebuilt on every forward pass.

Only NaN is treated as a hard error state.  The single sanctioned use of
``-inf`` is attention masking, where masked scores are defined to be minus
infinity before a softmax.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

_GRAD_ENABLED = True
_DEBUG_NAN_CHECKS = False


class Tensor:
    """A row-major float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._recorded = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    """One recorded op: inputs, output, and a function mapping the output
    gradient to per-input gradients (None for non-differentiable inputs)."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_RECORD: list[_Node] = []


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    """Create the output tensor and, when grad mode is active and any input
    needs a gradient, append a node to the record."""
    if _DEBUG_NAN_CHECKS and np.isnan(out_data).any():
        raise FloatingPointError("NaN produced by a forward op")
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._recorded = True
        _RECORD.append(_Node(tuple(inputs), out, backward_fn))
    return out


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug_nan_checks(flag: bool) -> None:
    global _DEBUG_NAN_CHECKS
    _DEBUG_NAN_CHECKS = bool(flag)


def record_length() -> int:
    return len(_RECORD)


def current_record() -> list:
    """Read-only view of the active record, for invariant tests."""
    return list(_RECORD)


def reset_record() -> None:
    _RECORD.clear()


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    The loss must be a scalar produced under the active record.  Gradients
    accumulate additively across multiple uses of a tensor and across repeated
    ``backward`` calls; optimizers reset them via ``zero_grad``.  The record is
    consumed: it is cleared once traversal finishes.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward expects a scalar loss tensor")
    if not loss._recorded:
        raise ContractError("loss is not connected to the active record")
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_RECORD):
        g = flows.pop(id(node.output), None)
        if g is None:
            continue
        # the pop above completes accumulation for this output (topological
        # order guarantees all its consumers were already visited)
        out = node.output
        out.grad = np.array(g, copy=True) if out.grad is None else out.grad + g
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._recorded:
                acc = flows.get(id(t))
                flows[id(t)] = gi if acc is None else acc + gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=np.float64, copy=True)
            else:
                t.grad += gi
    _RECORD.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record((a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record((a, b), out, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _record((a,), a.data * c, bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record((a,), out, bwd)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)  # subgradient 0 at the kink

    def bwd(g):
        return (g * sign,)

    return _record((a,), np.abs(a.data), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record((a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    # clamp at +-500 where sigmoid saturates exactly in float64, avoiding
    # a spurious overflow warning from exp
    out = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500.0, 500.0)))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record((a,), out, bwd)


def elu(a: Tensor) -> Tensor:
    """x for x >= 0, exp(x) - 1 below."""
    neg = a.data < 0
    # expm1 evaluated on the clamped array so the discarded branch cannot
    # overflow inside np.where
    out = np.where(neg, np.expm1(np.minimum(a.data, 0.0)), a.data)
    deriv = np.where(neg, out + 1.0, 1.0)

    def bwd(g):
        return (g * deriv,)

    return _record((a,), out, bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        return (g * inside,)

    return _record((a,), out, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then apply
    the affine (gain, bias).  The variance guard epsilon keeps constant rows
    finite (they normalize to exact zeros)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    d = x.data - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = d * inv
    out = gain.data * xhat + bias.data
    lead = tuple(range(x.ndim - 1))

    def bwd(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbias = g.sum(axis=lead) if lead else g
        return dx, _unbroadcast(dgain, gain.shape), _unbroadcast(dbias, bias.shape)

    return _record((x, gain, bias), out, bwd)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: surviving entries are scaled by 1/(1-p) in training
    mode; identity in eval mode.  p must lie in [0, 1)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        def bwd_id(g):
            return (g,)
        return _record((x,), x.data.copy(), bwd_id)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bwd(g):
        return (g * keep,)

    return _record((x,), x.data * keep, bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _record((a, b), out, bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError("transpose expects a 2-D tensor")

    def bwd(g):
        return (g.T,)

    return _record((a,), a.data.T.copy(), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _record((a,), a.data.reshape(shape), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _record(tuple(tensors), out, bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) along axis 0."""
    out = a.data[start:stop]
    shape = a.shape

    def bwd(g):
        dz = np.zeros(shape)
        dz[start:stop] = g
        return (dz,)

    return _record((a,), out, bwd)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; duplicate indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]
    shape = a.shape

    def bwd(g):
        dz = np.zeros(shape)
        np.add.at(dz, idx, g)
        return (dz,)

    return _record((a,), out, bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record((a,), out, bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax: outputs are nonnegative and sum to one along ``axis``.
    Entries equal to -inf (attention masking) map to exact zeros."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record((x,), out, bwd)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, kernels: Tensor, padding: str = "same") -> Tensor:
    """Dense 1-D convolution of x[C_in, L] with kernels[C_out, C_in, w].

    'same' padding keeps the output length at L (pad (w-1)//2 left, w//2
    right).  'valid' yields L - w + 1.
    """
    if x.ndim != 2 or kernels.ndim != 3:
        raise DimensionError("conv1d expects x[C_in, L] and kernels[C_out, C_in, w]")
    c_in, length = x.shape
    c_out, kc_in, w = kernels.shape
    if kc_in != c_in:
        raise DimensionError(f"kernel channel count {kc_in} != input channels {c_in}")
    if padding == "same":
        pad_l, pad_r = (w - 1) // 2, w // 2
    elif padding == "valid":
        pad_l = pad_r = 0
        if w > length:
            raise DimensionError("kernel wider than input under valid padding")
    else:
        raise ParameterError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (pad_l, pad_r)))
    out_len = xp.shape[1] - w + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, w, axis=1)  # [C_in, out_len, w]
    cols = windows.transpose(1, 0, 2).reshape(out_len, c_in * w)
    kmat = kernels.data.reshape(c_out, c_in * w)
    out = (cols @ kmat.T).T  # [C_out, out_len]

    def bwd(g):
        dk = (g @ cols).reshape(c_out, c_in, w)
        dcols = (g.T @ kmat).reshape(out_len, c_in, w)
        dxp = np.zeros_like(xp)
        for j in range(w):
            dxp[:, j:j + out_len] += dcols[:, :, j].T
        dx = dxp[:, pad_l:pad_l + length] if (pad_l or pad_r) else dxp
        return dx, dk

    return _record((x, kernels), out, bwd)


def max_pool1d(x: Tensor, window: int, stride: int, pad: int = 0) -> Tensor:
    """Windowed max over the last axis of x[C, L] with -inf padding.

    Output length is (L + 2*pad - window)//stride + 1; with window 3,
    stride 2, pad 1 this is ceil(L/2).  Ties resolve to the earliest index.
    """
    if window < 1 or stride < 1:
        raise ParameterError("window and stride must be >= 1")
    if pad < 0 or pad >= window:
        raise ParameterError("pad must satisfy 0 <= pad < window")
    if x.ndim != 2:
        raise DimensionError("max_pool1d expects x[C, L]")
    c, length = x.shape
    padded = length + 2 * pad
    if window > padded:
        raise DimensionError(f"window {window} exceeds padded length {padded}")
    xp = np.pad(x.data, ((0, 0), (pad, pad)), constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(xp, window, axis=1)[:, ::stride, :]
    out = windows.max(axis=-1)
    arg = windows.argmax(axis=-1)  # argmax takes the first maximum
    out_len = out.shape[1]
    starts = np.arange(out_len) * stride

    def bwd(g):
        dxp = np.zeros((c, padded))
        rows = np.repeat(np.arange(c), out_len)
        cols_idx = (starts[None, :] + arg).reshape(-1)
        np.add.at(dxp, (rows, cols_idx), g.reshape(-1))
        return (dxp[:, pad:pad + length] if pad else dxp,)

    return _record((x,), out, bwd)


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------

def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def parameter(rng: np.random.Generator, shape, fan_in: Optional[int] = None) -> Tensor:
    """Weight initialized uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).

    fan_in defaults to the first dimension, matching [in, out] weight layout.
    """
    shape = tuple(int(s) for s in shape)
    if fan_in is None:
        fan_in = shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def zeros_parameter(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)
