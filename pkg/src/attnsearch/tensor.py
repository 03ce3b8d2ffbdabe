"""Dense-tensor engine with tape-based reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float64 by default, float32 selectable). Every
primitive records its parents and a vjp closure on the output tensor; the tape
is the implicit graph of parent links and is rebuilt from scratch on every
forward pass. ``backward`` walks the tape in reverse topological order and
returns a gradient per registered parameter.
"""

from __future__ import annotations

import json
import struct

import numpy as np


class NumericalError(RuntimeError):
    """Non-finite value produced during a forward or backward pass."""


class ShapeError(ValueError):
    """Operands do not conform to the primitive's shape rule."""


_DEFAULT_DTYPE = np.float64
_CHECK_FINITE = True


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


def set_check_finite(enabled: bool) -> None:
    """Toggle the NaN/Inf hard-error check on op outputs and gradients."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """A numpy array plus tape bookkeeping.

    Interior (op-output) tensors are immutable; parameter tensors are leaf
    tensors whose ``data`` is replaced in place by the optimizer between
    steps. ``vjp`` maps the output gradient to one gradient per parent.
    """

    __slots__ = ("data", "parents", "vjp", "name", "op")

    def __init__(self, data, parents=(), vjp=None, name=None, op=None):
        self.data = np.asarray(data)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.name = name
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind in "fc":
        arr = arr.astype(_DEFAULT_DTYPE, copy=False)
    else:
        arr = arr.astype(_DEFAULT_DTYPE)
    return Tensor(arr)


def constant(x, dtype=None) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _make(data, parents, vjp, op: str) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values in output of op '{op}'")
    return Tensor(data, parents=parents, vjp=vjp, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` (reverses numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape),
                   _unbroadcast(g * a.data, b.shape)),
        "mul")


def matmul(a, b) -> Tensor:
    """Stacked matrix product; leading axes broadcast as in numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner-dim mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp, "matmul")


def channel_linear(x, w, b=None) -> Tensor:
    """1x1x1 convolution: a linear map over the trailing (channel) axis."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"channel_linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        b = as_tensor(b)
        out = out + b.data

    def vjp(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, w.shape[1])
        if b is None:
            return gx, gw
        gb = g.reshape(-1, w.shape[1]).sum(axis=0)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, vjp, "channel_linear")


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp, "concat")


def slice_(x, index) -> Tensor:
    """Basic (view) slicing; `index` is a tuple of slice objects."""
    x = as_tensor(x)
    out = x.data[index]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _make(out, (x,), vjp, "slice")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def pad(x, pad_width) -> Tensor:
    """Zero padding; pad_width as in np.pad."""
    x = as_tensor(x)
    out = np.pad(x.data, pad_width)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))
    return _make(out, (x,), lambda g: (g[index],), "pad")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def vjp(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return _make(out, (x,), vjp, "mean")


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), vjp, "sum")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _make(out, (x,), lambda g: (g * (x.data > 0),), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax over one axis, computed with max-subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (x,), vjp, "softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy; labels is an int array of shape (N,)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, K) logits, got {logits.shape}")
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(
            f"cross_entropy labels shape {labels.shape} != ({n},)")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(loss, (logits,), vjp, "cross_entropy")


_RESIZE_CACHE: dict = {}


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear interpolation matrix with half-pixel centers; rows sum to 1."""
    key = (n_in, n_out)
    if key in _RESIZE_CACHE:
        return _RESIZE_CACHE[key]
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
    else:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.minimum(np.floor(src).astype(int), n_in - 2)
        frac = src - i0
        rows = np.arange(n_out)
        m[rows, i0] = 1.0 - frac
        m[rows, i0 + 1] += frac
    _RESIZE_CACHE[key] = m
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Resize the (..., H, W, C) spatial axes with half-pixel bilinear weights."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"bilinear_resize expects (..., H, W, C), got {x.shape}")
    h_in, w_in = x.shape[-3], x.shape[-2]
    rh = _interp_matrix(h_in, out_h).astype(x.dtype)
    rw = _interp_matrix(w_in, out_w).astype(x.dtype)
    tmp = np.einsum("...hwc,oh->...owc", x.data, rh, optimize=True)
    out = np.einsum("...hwc,ow->...hoc", tmp, rw, optimize=True)

    def vjp(g):
        t = np.einsum("...hwc,wi->...hic", g, rw, optimize=True)
        return (np.einsum("...hwc,hi->...iwc", t, rh, optimize=True),)

    return _make(out, (x,), vjp, "bilinear_resize")


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params) -> dict:
    """Backpropagate from a scalar loss; returns {param name: gradient array}.

    `params` is a mapping of name -> Tensor (a ParameterStore works).
    Parameters not reachable from the loss receive zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if _CHECK_FINITE and not np.all(np.isfinite(pg)):
                raise NumericalError(
                    f"non-finite gradient flowing into op '{parent.op}'")
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    out = {}
    items = params.items() if hasattr(params, "items") else (
        (p.name, p) for p in params)
    for name, p in items:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            g = np.broadcast_to(g, p.data.shape).copy()
        if _CHECK_FINITE and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{name}'")
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParameterStore:
    """Registry of named trainable tensors; names are unique."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, shape, rng, init: str = "uniform_fanin",
               fan_in: int | None = None) -> Tensor:
        """Create and register a parameter.

        init: "uniform_fanin" draws U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with
        fan_in defaulting to shape[0]; "zeros" for biases and gates that must
        start neutral.
        """
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape, dtype=_DEFAULT_DTYPE)
        elif init == "uniform_fanin":
            fan = fan_in if fan_in is not None else (shape[0] if shape else 1)
            bound = 1.0 / np.sqrt(max(fan, 1))
            data = rng.uniform(-bound, bound, size=shape).astype(_DEFAULT_DTYPE)
        else:
            raise ValueError(f"unknown init '{init}'")
        return self.add_array(name, data)

    def add_array(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = Tensor(np.asarray(data), name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def state_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, arrays: dict) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter '{name}'")
            arr = np.asarray(arrays[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"checkpoint shape {arr.shape} != {t.data.shape} for '{name}'")
            t.data = arr.copy()


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float):
    """One SGD-with-momentum update: v <- momentum*v + g; p <- p - lr*v."""
    if param.shape != grad.shape:
        raise ShapeError(
            f"sgd_step shape mismatch: param {param.shape} vs grad {grad.shape}")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    v = momentum * velocity + grad
    return param - lr * v, v


class SGD:
    """SGD with momentum over a ParameterStore; per-step lr override allows
    schedules."""

    def __init__(self, store: ParameterStore, lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.store = store
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.store.items():
            g = grads[name]
            v = self._velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            p.data, self._velocity[name] = sgd_step(
                p.data, g, v, lr, self.momentum)


# ---------------------------------------------------------------------------
# checkpoint format: magic, header length, JSON header, little-endian payload

_CKPT_MAGIC = b"ATNS"


def save_checkpoint(path, arrays: dict) -> None:
    """Write named arrays as a flat binary file with a JSON header."""
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float32:
            arr = arr.astype("<f4")
            dtype = "float32"
        else:
            arr = arr.astype("<f8")
            dtype = "float64"
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": dtype, "offset": len(payload)})
        payload.extend(arr.tobytes())
    header = json.dumps({"arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(bytes(payload))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (header_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()
    out = {}
    for entry in header["arrays"]:
        np_dtype = "<f4" if entry["dtype"] == "float32" else "<f8"
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype=np_dtype, count=count,
                            offset=entry["offset"])
        out[entry["name"]] = arr.reshape(shape).astype(
            np.float32 if entry["dtype"] == "float32" else np.float64)
    return out
