"""Reverse-mode autodiff on float64 numpy arrays.

Define-by-run tape in the micrograd style: every op builds a Tensor holding
its result, the grad-requiring parents, and a closure that pushes the output
gradient back to them. backward() seeds a scalar loss with gradient one and
sweeps the tape in reverse topological order (iteratively; decoder tapes run
to thousands of nodes, deeper than Python's recursion limit).

Every forward op validates that its result is finite and raises
NumericalError naming the op otherwise, so a NaN is caught where it is born
rather than three modules downstream. Gradients get the same check during
the backward sweep.

Gradient recording is controlled per thread: inside no_grad() ops produce
plain constants, which is what lets scenario generation run on worker
threads while a training tape lives on the main thread.
"""

from __future__ import annotations

import json
import math
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _check_finite(data: np.ndarray, op: str):
    # the sum is a cheap screen: NaN/Inf anywhere poisons it; a finite sum of
    # non-finite entries is impossible, and a sum that overflowed on its own
    # is ruled out by the exact elementwise re-check before raising
    if not np.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NumericalError(f"op '{op}' produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the shape of its source."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag}, op={self._op})"

    # operator sugar; wrapping constants keeps call sites readable
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def constant(value) -> Tensor:
    return _wrap(value)


def param(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


def _node(data: np.ndarray, parents: tuple, op: str, backward,
          check: bool = True) -> Tensor:
    # structural ops (reshape, slice, concat, ...) rearrange already-checked
    # values and may skip the finite check
    if check:
        _check_finite(data, op)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
        out._op = op
    return out


# ---------------------------------------------------------------- basic ops

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _node(data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    def backward(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _node(data, (a, b), "sub", backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _node(-a.data, (a,), "neg", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _node(data, (a, b), "mul", backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    def backward(g):
        a._accumulate(g / b.data)
        b._accumulate(-g * a.data / (b.data * b.data))

    return _node(data, (a, b), "div", backward)


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)

    def backward(g):
        a._accumulate(g * e * a.data ** (e - 1.0))

    return _node(a.data ** e, (a,), "pow", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or batched operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions of {a.data.shape} and {b.data.shape} differ")
    data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _node(data, (a, b), "matmul", backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for a (d_in, d_out) weight and (d_out,) bias."""
    if w.data.ndim != 2 or b.data.ndim != 1 or w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"affine: bad parameter shapes {w.data.shape}, {b.data.shape}")
    if x.data.ndim < 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"affine: input {x.data.shape} does not match weight {w.data.shape}")
    data = x.data @ w.data + b.data

    def backward(g):
        gm = g.reshape(-1, g.shape[-1])
        x._accumulate(g @ w.data.T)
        w._accumulate(x.data.reshape(-1, x.data.shape[-1]).T @ gm)
        b._accumulate(gm.sum(axis=0))

    return _node(data, (x, w, b), "affine", backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _node(data, (a,), "exp", backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), "log", backward)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / data)

    return _node(data, (a,), "sqrt", backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return _node(data, (a,), "tanh", backward)


def sin(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g * np.cos(a.data))

    return _node(np.sin(a.data), (a,), "sin", backward)


def cos(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g * np.sin(a.data))

    return _node(np.cos(a.data), (a,), "cos", backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0.0))

    return _node(data, (a,), "relu", backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; exact erf is not worth a dependency here
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner))

    return _node(data, (a,), "gelu", backward)


def clip(a: Tensor, low: float, high: float) -> Tensor:
    data = np.clip(a.data, low, high)

    def backward(g):
        a._accumulate(g * ((a.data >= low) & (a.data <= high)))

    return _node(data, (a,), "clip", backward)


# ------------------------------------------------------------ shaped ops

def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.data.shape} to {shape}")

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _node(data, (a,), "reshape", backward, check=False)


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    def backward(g):
        a._accumulate(np.swapaxes(g, axis1, axis2))

    return _node(np.swapaxes(a.data, axis1, axis2), (a,), "swapaxes", backward, check=False)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.data.shape for t in tensors]}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(start, stop)
            t._accumulate(g[tuple(key)])

    return _node(data, tuple(tensors), "concat", backward, check=False)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.data.shape for t in tensors]}")

    def backward(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))

    return _node(data, tuple(tensors), "stack", backward, check=False)


def slice_(a: Tensor, key) -> Tensor:
    """Basic indexing (ints, slices, tuples of them); advanced indexing goes
    through gather instead, which keeps the backward a disjoint write."""
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._accumulate(full)

    return _node(data, (a,), "slice", backward, check=False)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Index one axis with an integer array; repeated indices sum in backward."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.data.ndim
    moved = np.moveaxis(a.data, axis, 0)
    if indices.size and (indices.min() < 0 or indices.max() >= moved.shape[0]):
        raise ShapeError(f"gather: index out of range for axis {axis} of {a.data.shape}")
    # the indexed axis expands to the index array's dims, staying in place
    src = tuple(range(indices.ndim))
    dst = tuple(range(axis, axis + indices.ndim))
    data = np.moveaxis(moved[indices], src, dst)

    def backward(g):
        g_moved = np.moveaxis(g, dst, src)
        full = np.zeros_like(moved)
        np.add.at(full, indices, g_moved)
        a._accumulate(np.moveaxis(full, 0, axis))

    return _node(data, (a,), "gather", backward, check=False)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    if not math.isfinite(value):
        raise NumericalError("masked_fill: fill value must be finite")
    mask = np.asarray(mask, dtype=bool)
    try:
        data = np.where(mask, float(value), a.data)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast over {a.data.shape}")

    def backward(g):
        a._accumulate(np.where(mask, 0.0, g))

    return _node(data, (a,), "masked_fill", backward, check=False)


# --------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _node(data, (a,), "sum", backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / data.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape) / count)

    return _node(data, (a,), "mean", backward)


def sum_squares(a: Tensor) -> Tensor:
    data = np.array(np.sum(a.data * a.data))

    def backward(g):
        a._accumulate(2.0 * g * a.data)

    return _node(data, (a,), "sum_squares", backward)


# ------------------------------------------------- normalization / attention

def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance; optional fused
    per-feature gain and bias (both (d,) tensors)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    if gain is None:
        def backward(g):
            g_mean = g.mean(axis=-1, keepdims=True)
            gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (g - g_mean - xhat * gx_mean))

        return _node(xhat, (a,), "layer_norm", backward)

    if bias is None or gain.data.shape != bias.data.shape or gain.data.ndim != 1:
        raise ShapeError("layer_norm: gain and bias must both be 1-D tensors of equal size")
    data = xhat * gain.data + bias.data
    lead = tuple(range(a.data.ndim - 1))

    def backward(g):
        gain._accumulate((g * xhat).sum(axis=lead))
        bias._accumulate(g.sum(axis=lead))
        gh = g * gain.data
        g_mean = gh.mean(axis=-1, keepdims=True)
        gx_mean = (gh * xhat).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (gh - g_mean - xhat * gx_mean))

    return _node(data, (a, gain, bias), "layer_norm", backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - inner))

    return _node(data, (a,), "softmax", backward)


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None,
                     blocked: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(dh) + bias) v as one tape node; blocked is a bool
    mask (True = key hidden from query) applied before the softmax."""
    if q.data.shape[-1] != k.data.shape[-1] or k.data.shape != v.data.shape:
        raise ShapeError(f"scaled_attention: incompatible shapes q {q.data.shape}, "
                         f"k {k.data.shape}, v {v.data.shape}")
    scale = 1.0 / math.sqrt(q.data.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if bias is not None:
        scores = scores + bias.data
    if blocked is not None:
        blocked = np.asarray(blocked, dtype=bool)
        scores = np.where(blocked, -1e9, scores)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=-1, keepdims=True)
    data = weights @ v.data

    def backward(g):
        v._accumulate(np.swapaxes(weights, -1, -2) @ g)
        gw = g @ np.swapaxes(v.data, -1, -2)
        gs = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True))
        # blocked entries carry zero weight, so gs is already zero there
        if bias is not None:
            bias._accumulate(gs)
        q._accumulate((gs @ k.data) * scale)
        k._accumulate(np.swapaxes(gs, -1, -2) @ q.data * scale)

    parents = (q, k, v) if bias is None else (q, k, v, bias)
    return _node(data, parents, "scaled_attention", backward)


# ------------------------------------------------------------- backward

def backward(loss: Tensor):
    """Populate grads of everything reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        # same two-stage finite check as the forward path: cheap sum screen,
        # exact elementwise confirmation before raising
        if not np.isfinite(np.sum(node.grad)) and not np.all(np.isfinite(node.grad)):
            raise NumericalError(f"backward of '{node._op}' received non-finite gradient")
        node._backward(node.grad)


# ------------------------------------------------------------- parameters

class Module:
    """Parameter container; attributes that are grad-requiring Tensors (or
    Modules, or lists of either) are tracked for optimization and
    checkpointing. Attribute order gives a stable parameter order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, entry in enumerate(value):
                    if isinstance(entry, Tensor) and entry.requires_grad:
                        yield f"{full}.{i}", entry
                    elif isinstance(entry, Module):
                        yield from entry.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: np.array(p.data) for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        mine = dict(self.named_parameters())
        missing = sorted(set(mine) - set(state))
        extra = sorted(set(state) - set(mine))
        if missing or extra:
            raise ShapeError(f"state dict mismatch; missing {missing}, unexpected {extra}")
        for name, p in mine.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ShapeError(f"parameter '{name}': checkpoint shape {value.shape} "
                                 f"!= model shape {p.data.shape}")
            p.data = value.copy()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


# ------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState):
    """One Adam update with bias correction; mutates params and state."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params vs {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


class Adam:
    """Optimizer facade over adam_step bound to a fixed parameter list."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = "flowckpt 1"


def save_checkpoint(path: str | os.PathLike, arrays: dict[str, np.ndarray],
                    meta: dict | None = None):
    """Write named float64 arrays with a text header; byte-deterministic.

    Header: magic line, one meta line (canonical JSON), one line per tensor
    ("tensor <name> <comma-joined dims> <byte offset>") in sorted name order,
    then a "data" line; payload is the concatenated little-endian float64
    C-order buffers. No timestamps, so identical arrays give identical bytes.
    """
    names = sorted(arrays)
    for name in names:
        if any(ws in name for ws in (" ", "\t", "\n")):
            raise ValueError(f"tensor name {name!r} contains whitespace")
    lines = [CHECKPOINT_MAGIC,
             "meta " + json.dumps(meta or {}, sort_keys=True, allow_nan=False,
                                  separators=(",", ":"))]
    payload = bytearray()
    for name in names:
        src = np.asarray(arrays[name], dtype="<f8")
        # note ascontiguousarray promotes 0-d to 1-d; record dims beforehand
        dims = ",".join(str(d) for d in src.shape) if src.ndim else "-"
        lines.append(f"tensor {name} {dims} {len(payload)}")
        payload += np.ascontiguousarray(src).tobytes()
    lines.append("data")
    blob = ("\n".join(lines) + "\n").encode("ascii") + bytes(payload)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        blob = f.read()
    marker = b"\ndata\n"
    split = blob.find(marker)
    if split < 0 or not blob.startswith(CHECKPOINT_MAGIC.encode("ascii")):
        raise ValueError(f"{path}: not a checkpoint file")
    header = blob[:split].decode("ascii").splitlines()
    payload = blob[split + len(marker):]
    meta = json.loads(header[1].removeprefix("meta "))
    arrays: dict[str, np.ndarray] = {}
    for line in header[2:]:
        _, name, dims, offset = line.split(" ")
        shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(offset)
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[name] = arr.reshape(shape).astype(np.float64)
    return arrays, meta
