"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records a node whose backward rule is itself written in
terms of tensor operations, so gradients computed with
``create_graph=True`` can be differentiated again. That is what lets the
distillation loop differentiate a loss evaluated at weights that were
produced by gradient steps.
"""

from __future__ import annotations

import contextlib
import functools
import itertools
import threading
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "tensor",
    "zeros",
    "ones",
    "grad",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "strict",
    "is_strict",
    "matmul",
    "relu",
    "exp",
    "log",
    "take",
    "scatter_add",
    "logsumexp",
    "softmax",
    "log_softmax",
    "pad2d",
    "conv2d",
    "max_pool2d",
    "batch_norm",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf while strict mode was on."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by op '{op}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.strict = False
        self.tapes: list[Tape] = []


_state = _State()
_node_ids = itertools.count()


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def strict(on: bool = True):
    """Raise :class:`NonFiniteError` as soon as any op yields NaN/Inf."""
    prev = _state.strict
    _state.strict = on
    try:
        yield
    finally:
        _state.strict = prev


def is_strict() -> bool:
    return _state.strict


class Node:
    __slots__ = ("id", "op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward = backward

    def __repr__(self):
        return f"Node({self.id}, {self.op})"


class Tape:
    """Records, in creation order, every node built inside its ``with`` block.

    Node ids come from one global counter, so the recorded list is always
    topologically ordered: a node's inputs were created before it. Graph
    lifetime is governed by references from tensors, not by the tape; the
    tape is an audit log.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def is_topological(self) -> bool:
        for node in self.nodes:
            for inp in node.inputs:
                if inp._node is not None and inp._node.id >= node.id:
                    return False
        return True


class Tensor:
    """N-d float64 array plus an optional handle to the node that made it."""

    __slots__ = ("data", "requires_grad", "_node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        if _state.strict and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor", "non-finite leaf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t._node = None
        return t

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        return None if self._node is None else self._node.id

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if self._node is not None and not flag:
            raise ValueError("cannot clear requires_grad on a recorded tensor; use detach()")
        self.requires_grad = flag
        return self

    def __repr__(self):
        extra = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{extra})"

    def __len__(self):
        return self.shape[0]

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.array(x, dtype=np.float64))


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if _state.strict:
        for inp in inputs:
            if inp._node is None and not np.all(np.isfinite(inp.data)):
                raise NonFiniteError(op, "non-finite input")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(op)
    out = Tensor._wrap(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        node = Node(op, inputs, backward)
        out.requires_grad = True
        out._node = node
        for tape in _state.tapes:
            tape.nodes.append(node)
    return out


# -- shape plumbing ---------------------------------------------------------

def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = tsum(g, axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


def broadcast_to(x, shape) -> Tensor:
    x = _lift(x)
    shape = tuple(shape)
    src = x.shape
    if src == shape:
        return x
    return _result(
        "broadcast_to",
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g: (_sum_to(g, src),),
    )


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    src = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (reshape(g, src),))


def transpose(x, axes=None) -> Tensor:
    x = _lift(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(
        "transpose",
        np.ascontiguousarray(np.transpose(x.data, axes)),
        (x,),
        lambda g: (transpose(g, inv),),
    )


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _result(
        "add", a.data + b.data, (a, b), lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _result(
        "sub", a.data - b.data, (a, b), lambda g: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        ga = _sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = _sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _result("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        ga = _sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _result("div", data, (a, b), backward)


def neg(x) -> Tensor:
    x = _lift(x)
    return _result("neg", -x.data, (x,), lambda g: (neg(g),))


def power(x, exponent: float) -> Tensor:
    """Elementwise ``x ** exponent`` for a constant real exponent."""
    x = _lift(x)
    if isinstance(exponent, Tensor):
        raise TypeError("power() takes a constant exponent")
    c = float(exponent)

    def backward(g):
        if c == 0.0:
            return (mul(g, 0.0),)
        if c == 1.0:
            return (g,)
        return (mul(g, mul(c, power(x, c - 1.0))),)

    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.power(x.data, c)
    return _result("pow", data, (x,), backward)


def exp(x) -> Tensor:
    x = _lift(x)
    return _result("exp", np.exp(x.data), (x,), lambda g: (mul(g, exp(x)),))


def log(x) -> Tensor:
    x = _lift(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    return _result("log", data, (x,), lambda g: (div(g, x),))


def relu(x) -> Tensor:
    x = _lift(x)
    mask = (x.data > 0).astype(np.float64)
    return _result("relu", x.data * mask, (x,), lambda g: (mul(g, mask),))


def matmul(a, b) -> Tensor:
    """Product of two 2-d tensors."""
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _result("matmul", a.data @ b.data, (a, b), backward)


# -- reductions -------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keepdims_shape(shape, axes) -> tuple[int, ...]:
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _lift(x)
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    kshape = _keepdims_shape(src, axes)

    def backward(g):
        if not keepdims:
            g = reshape(g, kshape)
        return (broadcast_to(g, src),)

    return _result("sum", np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _lift(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return div(tsum(x, axes, keepdims), float(count))


def tmax(x, axis=None, keepdims=False) -> Tensor:
    """Max reduction; ties share the incoming gradient equally."""
    x = _lift(x)
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    kshape = _keepdims_shape(src, axes)
    top = np.max(x.data, axis=axes, keepdims=True)
    mask = (x.data == top).astype(np.float64)
    mask /= np.sum(mask, axis=axes, keepdims=True)
    data = top if keepdims else top.reshape([n for i, n in enumerate(src) if i not in axes])

    def backward(g):
        if not keepdims:
            g = reshape(g, kshape)
        return (mul(broadcast_to(g, src), mask),)

    return _result("max", data, (x,), backward)


# -- gather / scatter -------------------------------------------------------

def take(x, index: np.ndarray) -> Tensor:
    """``x.ravel()[index]``; the result has ``index``'s shape."""
    x = _lift(x)
    index = np.asarray(index, dtype=np.intp)
    size, src = x.size, x.shape

    def backward(g):
        return (reshape(scatter_add(g, index, size), src),)

    return _result("take", x.data.reshape(-1)[index], (x,), backward)


def scatter_add(x, index: np.ndarray, size: int) -> Tensor:
    """Flat length-``size`` vector with ``x`` summed into positions ``index``.

    ``index`` must have ``x``'s shape. This is the adjoint of :func:`take`.
    """
    x = _lift(x)
    index = np.asarray(index, dtype=np.intp)
    if index.shape != x.shape:
        raise ValueError(f"scatter_add index shape {index.shape} != value shape {x.shape}")
    data = np.bincount(index.reshape(-1), weights=x.data.reshape(-1), minlength=size)
    if data.size != size:
        raise ValueError(f"scatter index out of range for size {size}")
    return _result("scatter_add", data, (x,), lambda g: (take(g, index),))


def getitem(x, key) -> Tensor:
    x = _lift(x)
    index = np.arange(x.size).reshape(x.shape)[key]
    return take(x, index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(key)))
        return tuple(out)

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = _lift(t)
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


# -- composite ops ----------------------------------------------------------

def logsumexp(x, axis=-1, keepdims=False) -> Tensor:
    x = _lift(x)
    # shift by a constant: exact for the value, and the shift's gradient cancels
    shift = np.max(x.data, axis=axis, keepdims=True)
    out = add(log(tsum(exp(sub(x, shift)), axis=axis, keepdims=True)), shift)
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def log_softmax(x, axis=-1) -> Tensor:
    x = _lift(x)
    return sub(x, logsumexp(x, axis=axis, keepdims=True))


def softmax(x, axis=-1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


@functools.lru_cache(maxsize=64)
def _pad_index(shape: tuple[int, ...], pad: int) -> tuple[np.ndarray, tuple[int, ...]]:
    n, c, h, w = shape
    padded = (n, c, h + 2 * pad, w + 2 * pad)
    grid = np.arange(np.prod(padded)).reshape(padded)
    index = grid[:, :, pad:pad + h, pad:pad + w].copy()
    index.flags.writeable = False
    return index, padded


def pad2d(x, pad: int) -> Tensor:
    """Zero-pad the last two axes of an NCHW tensor by ``pad`` on each side."""
    x = _lift(x)
    if pad == 0:
        return x
    index, padded = _pad_index(x.shape, pad)
    return reshape(scatter_add(x, index, int(np.prod(padded))), padded)


@functools.lru_cache(maxsize=64)
def _im2col_index(shape: tuple[int, ...], k: int, stride: int) -> np.ndarray:
    n, c, h, w = shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    ni = np.arange(n)[:, None, None, None, None, None]
    ci = np.arange(c)[None, None, None, :, None, None]
    ri = (np.arange(ho) * stride)[None, :, None, None, None, None] + np.arange(k)[None, None, None, None, :, None]
    cj = (np.arange(wo) * stride)[None, None, :, None, None, None] + np.arange(k)[None, None, None, None, None, :]
    flat = ((ni * c + ci) * h + ri) * w + cj
    index = flat.reshape(n * ho * wo, c * k * k)
    index.flags.writeable = False
    return index


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of an NCHW batch with OIkk filters."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    out_ch, in_ch, k, k2 = weight.shape
    if k != k2:
        raise ValueError("conv2d supports square kernels only")
    if x.shape[1] != in_ch:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, weight {in_ch}")
    xp = pad2d(x, padding)
    n, _, h, w = xp.shape
    if h < k or w < k:
        raise ValueError(f"conv2d kernel {k} larger than padded input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols = take(xp, _im2col_index(xp.shape, k, stride))
    out = matmul(cols, transpose(reshape(weight, (out_ch, in_ch * k * k))))
    if bias is not None:
        out = add(out, bias)
    return transpose(reshape(out, (n, ho, wo, out_ch)), (0, 3, 1, 2))


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` max pooling; ragged edges are dropped."""
    x = _lift(x)
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ValueError(f"max_pool2d window {size} larger than input {h}x{w}")
    if (h, w) != (ho * size, wo * size):
        x = getitem(x, (slice(None), slice(None), slice(0, ho * size), slice(0, wo * size)))
    x = reshape(x, (n, c, ho, size, wo, size))
    x = transpose(x, (0, 1, 2, 4, 3, 5))
    x = reshape(x, (n, c, ho, wo, size * size))
    return tmax(x, axis=-1)


def batch_norm(
    x,
    weight,
    bias,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize over every axis except 1 (the channel/feature axis).

    In training mode the batch mean and variance are computed from the data
    but enter the graph as constants; no gradient flows through them. The
    running statistics are returned updated with ``momentum`` (unbiased
    variance, as is conventional). In eval mode the running statistics are
    used and returned unchanged.
    """
    x = _lift(x)
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = tuple(x.shape[1] if i == 1 else 1 for i in range(x.ndim))
    if training:
        mu = np.mean(x.data, axis=axes)
        var = np.var(x.data, axis=axes)
        count = x.size // x.shape[1]
        unbiased = var * count / max(count - 1, 1)
        new_mean = (1 - momentum) * running_mean + momentum * mu
        new_var = (1 - momentum) * running_var + momentum * unbiased
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    scale = 1.0 / np.sqrt(np.asarray(var) + eps)
    y = mul(sub(x, np.reshape(mu, bshape)), np.reshape(scale, bshape))
    y = add(mul(y, reshape(weight, bshape)), reshape(bias, bshape))
    return y, new_mean, new_var


# -- differentiation --------------------------------------------------------

def _key(t: Tensor):
    return ("n", t._node.id) if t._node is not None else ("l", id(t))


def grad(
    output: Tensor,
    wrt: Tensor | Iterable[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
):
    """Gradient of scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the backward pass is itself recorded, so the
    returned gradients can be differentiated again. Only nodes lying on a
    path from some ``wrt`` tensor to ``output`` are visited.
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    if output.size != 1:
        raise ValueError(f"grad() needs a scalar output, got shape {output.shape}")
    for i, t in enumerate(targets):
        if not t.requires_grad:
            raise ValueError(f"wrt[{i}] does not require grad")
    target_keys = {_key(t) for t in targets}

    nodes: dict[int, Node] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or node.id in nodes:
            continue
        nodes[node.id] = node
        stack.extend(node.inputs)

    # forward sweep: which nodes depend on some target
    relevant: set[int] = set()
    for nid in sorted(nodes):
        for inp in nodes[nid].inputs:
            if _key(inp) in target_keys or (inp._node is not None and inp._node.id in relevant):
                relevant.add(nid)
                break

    out_key = _key(output)
    reached = set()
    found: dict = {}
    if out_key in target_keys:
        reached.add(out_key)
    elif output._node is None or output._node.id not in relevant:
        if not allow_unused:
            raise ValueError("output does not depend on any wrt tensor (not on the tape)")

    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        grads: dict = {out_key: Tensor._wrap(np.ones_like(output.data))}
        for nid in sorted(relevant, reverse=True):
            node = nodes[nid]
            g = grads.pop(("n", nid), None)
            if g is None:
                continue
            if ("n", nid) in target_keys:
                found[("n", nid)] = g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                k = _key(inp)
                is_target = k in target_keys
                if not is_target and not (inp._node is not None and inp._node.id in relevant):
                    continue
                if is_target:
                    reached.add(k)
                grads[k] = add(grads[k], gi) if k in grads else gi

    results = []
    for i, t in enumerate(targets):
        k = _key(t)
        g = found.get(k, grads.get(k))
        if g is None:
            if not allow_unused and k not in reached:
                raise ValueError(f"wrt[{i}] is not on the tape of this output")
            g = Tensor._wrap(np.zeros(t.shape))
        if g.shape != t.shape:
            g = reshape(g, t.shape)
        results.append(g)
    return results[0] if single else results
