"""Rank-4 tensors with reverse-mode automatic differentiation.

Every tensor is laid out as (batch, channel, height, width); scalars are
(1, 1, 1, 1). Operations record a closure mapping the output gradient to
the gradients of their inputs, and :func:`backward` replays those closures
in reverse topological order. Gradients accumulate into ``.grad`` of leaf
tensors, so a tensor feeding several consumers (the shared encoder feeding
both decoders) receives the sum of all contributions.
"""

import contextlib
import struct

import numpy as np

from .errors import ContractError, DataError, ShapeError, SizeError

DEFAULT_DTYPE = np.float32
MAX_ELEMENTS = 2**31 - 1
SCALAR_SHAPE = (1, 1, 1, 1)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def make_rng(seed, *stream):
    """Counter-based generator keyed by ``seed`` and an optional stream path.

    ``make_rng(seed, epoch, index)`` always yields the same draws, which is
    what lets shuffling and augmentation be replayed from a checkpoint.
    """
    ss = np.random.SeedSequence([int(seed), *(int(s) for s in stream)])
    return np.random.Generator(np.random.Philox(ss))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "retains_grad",
                 "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 (N, C, H, W); got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.retains_grad = False
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def retain_grad(self):
        self.retains_grad = True
        return self

    def astype(self, dtype):
        """Cast to ``dtype``. The result is a new leaf."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return hadamard(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else mul_scalar(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul_scalar(reciprocal(self), other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)


def create(shape, init="zeros", *, value=0.0, mean=0.0, std=1.0, seed=0,
           dtype=DEFAULT_DTYPE, requires_grad=False, name=None):
    """Allocate a tensor filled by ``init`` in {"zeros", "constant", "normal"}.

    "normal" draws from a Philox stream keyed by ``seed``; the values are
    generated in float64 and cast, so the same seed gives the same bits on
    every platform with IEEE arithmetic.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"shape must have 4 extents, got {shape}")
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in {shape}")
    total = 1
    for s in shape:
        if s >= 2**32:
            raise SizeError(f"extent {s} exceeds 32-bit range")
        total *= s
    if total > MAX_ELEMENTS:
        raise SizeError(f"{shape} holds {total} elements, limit is {MAX_ELEMENTS}")
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif init == "normal":
        if std < 0:
            raise ContractError(f"std must be >= 0, got {std}")
        draws = make_rng(seed).standard_normal(shape)
        data = (draws * std + mean).astype(dtype)
    else:
        raise ContractError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad, name=name)


def _result(data, parents, backward_fn, op):
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------

def add(a, b):
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def hadamard(a, b):
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "hadamard")


def div(a, b):
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def add_scalar(a, c):
    return _result(a.data + a.dtype.type(c), (a,), lambda g: (g,), "add_scalar")


def mul_scalar(a, c):
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")


def cast(a, dtype):
    """Differentiable dtype change; the gradient comes back in ``a``'s dtype."""
    src = a.dtype
    return _result(a.data.astype(dtype), (a,), lambda g: (g.astype(src),), "cast")


def reciprocal(a):
    ad = a.data
    return _result(1.0 / ad, (a,), lambda g: (-g / (ad * ad),), "reciprocal")


def pow_scalar(a, p):
    ad = a.data
    p = a.dtype.type(p)
    return _result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def relu(a):
    ad = a.data
    # subgradient at exactly 0 is 0
    return _result(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),), "relu")


def sigmoid(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a):
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def log(a):
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clamp(a, lo=None, hi=None):
    """Clip values; the gradient is zero wherever clipping took effect."""
    ad = a.data
    out = np.clip(ad, lo, hi)
    keep = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        keep &= ad >= lo
    if hi is not None:
        keep &= ad <= hi
    return _result(out, (a,), lambda g: (g * keep,), "clamp")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "hadamard": hadamard, "div": div}


def elementwise(op, a, b=None):
    """Dispatch by name to a unary (relu, sigmoid, tanh) or binary (add, sub, hadamard, div) op."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ContractError(f"unknown elementwise op {op!r}")


# -- reductions and channel plumbing ----------------------------------------

def sum_all(a):
    shape, dtype = a.shape, a.dtype
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=dtype).reshape(SCALAR_SHAPE)
    return _result(out, (a,), lambda g: (np.full(shape, g.reshape(-1)[0], dtype=dtype),), "sum")


def mean_all(a):
    return mul_scalar(sum_all(a), 1.0 / a.size)


def concat_channels(tensors):
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat_channels needs at least one tensor")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {tensors[0].shape} vs {t.shape}")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([t.shape[1] for t in tensors])[:-1]
    # channels-last memory behind an NCHW view, matching conv outputs
    out = np.concatenate([t.data.transpose(0, 2, 3, 1) for t in tensors],
                         axis=3).transpose(0, 3, 1, 2)
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=1)), "concat")


def split_channels(a, sizes):
    """Inverse of :func:`concat_channels` for the given channel extents."""
    if sum(sizes) != a.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not cover {a.shape[1]} channels")
    outs = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def back(g, lo=lo, hi=hi):
            n, c, h, w = a.shape
            full = np.zeros((n, h, w, c), dtype=g.dtype).transpose(0, 3, 1, 2)
            full[:, lo:hi] = g
            return (full,)

        outs.append(_result(a.data[:, lo:hi], (a,), back, "split"))
        start = hi
    return outs


def scale_by_map(x, m):
    """Multiply every channel of ``x`` by the single-channel map ``m``."""
    if m.shape != (x.shape[0], 1, x.shape[2], x.shape[3]):
        raise ShapeError(f"scale_by_map: map {m.shape} does not fit {x.shape}")
    xd, md = x.data, m.data
    return _result(xd * md, (x, m),
                   lambda g: (g * md, (g * xd).sum(axis=1, keepdims=True)), "scale_by_map")


def channel_scale(x, w):
    """Multiply channel c of ``x`` by the scalar ``w[0, c, 0, 0]``."""
    if w.shape != (1, x.shape[1], 1, 1):
        raise ShapeError(f"channel_scale: weight {w.shape} does not fit {x.shape}")
    xd, wd = x.data, w.data
    return _result(xd * wd, (x, w),
                   lambda g: (g * wd, (g * xd).sum(axis=(0, 2, 3), keepdims=True)),
                   "channel_scale")


def attach_zero_grad(x, param):
    """Return ``x`` unchanged but record ``param`` as an input with zero gradient.

    Used where a term is skipped because it multiplies an all-zero state:
    the parameter still participates in the graph, with its exact
    (zero) gradient.
    """
    return _result(x.data, (x, param), lambda g: (g, np.zeros_like(param.data)), "identity")


# -- backward pass ----------------------------------------------------------

def _topological(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate: call ``zero_grad`` between steps.
    """
    if loss.shape != SCALAR_SHAPE:
        raise ContractError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = _topological(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or node.retains_grad:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad += g
        if node.is_leaf:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# -- binary dump format -----------------------------------------------------

DUMP_MAGIC = b"DOT1"


def dump_tensor(t, fp):
    """Write ``DOT1``, four little-endian u32 extents, then f32 LE data."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    fp.write(DUMP_MAGIC)
    fp.write(struct.pack("<4I", *data.shape))
    fp.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_tensor(fp, dtype=DEFAULT_DTYPE):
    magic = fp.read(4)
    if magic != DUMP_MAGIC:
        raise DataError(f"bad tensor magic {magic!r}")
    header = fp.read(16)
    if len(header) != 16:
        raise DataError("truncated tensor header")
    shape = struct.unpack("<4I", header)
    count = int(np.prod(shape, dtype=np.int64))
    payload = fp.read(4 * count)
    if len(payload) != 4 * count:
        raise DataError(f"truncated tensor payload for shape {shape}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(dtype)
    return Tensor(data)
