"""Float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded onto the innermost active :class:`GradTape` whenever at
least one input requires gradients. Outside a tape nothing is recorded, which is
how inference and analysis passes run.

Random initialization goes through :func:`make_rng`, a NumPy ``Generator`` over
the PCG64 bit generator, so a seed fully determines every draw.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_local = threading.local()
_debug = False


class NonFiniteError(FloatingPointError):
    pass


def set_debug(enabled: bool) -> None:
    """Toggle the NaN/Inf check that runs after every operation."""
    global _debug
    _debug = bool(enabled)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator; ``stream`` ids derive independent generators from one seed."""
    if stream:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    """A dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if any(dim <= 0 for dim in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return bmm(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=DTYPE))


class GradTape:
    """Ordered record of operations; replays adjoints in reverse on backward().

    Usage::

        with GradTape() as tape:
            loss = f(params)
        tape.backward(loss)      # fills p.grad for every leaf parameter
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._outputs: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "GradTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> None:
        if self._consumed:
            raise RuntimeError("cannot record onto a tape that already ran backward")
        for p in parents:
            if p.requires_grad and id(p) not in self._outputs and id(p) not in self._leaves:
                self._leaves[id(p)] = p
        self._outputs.add(id(out))
        self._nodes.append((out, parents, vjp))

    def backward(self, loss: Tensor) -> list[Tensor]:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad``; returns the leaves."""
        if self._consumed:
            raise RuntimeError("backward already called on this tape; record a new one")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise ValueError("loss was not produced by operations recorded on this tape")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        leaves = list(self._leaves.values())
        for leaf in leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        self._nodes = []
        self._outputs.clear()
        return leaves


def _tape_stack() -> list[GradTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced NaN or Inf")
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._record(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, b)
    if isinstance(a, (int, float)):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _result(ad / bd, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), vjp)


# --- reductions and shape --------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tensor_sum(a, axis, keepdims), 1.0 / count)


def reduce_max(a: Tensor, axis: int = -1) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    idx = np.argmax(a.data, axis=axis)
    idx_e = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_e, axis=axis).squeeze(axis)
    shape = a.shape

    def vjp(g):
        ga = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(ga, idx_e, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _result(out, (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _result(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def index(a: Tensor, key) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate in the gradient."""
    shape = a.shape

    def vjp(g):
        ga = np.zeros(shape, dtype=DTYPE)
        np.add.at(ga, key, g)
        return (ga,)

    return _result(np.asarray(a.data[key]), (a,), vjp)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows along axis 0 (embedding lookup)."""
    rows = np.asarray(rows)
    shape = a.shape

    def vjp(g):
        ga = np.zeros(shape, dtype=DTYPE)
        np.add.at(ga, rows.reshape(-1), g.reshape(-1, *shape[1:]))
        return (ga,)

    return _result(a.data[rows], (a,), vjp)


def index_add(base: Tensor, rows: np.ndarray, values: Tensor) -> Tensor:
    """``base`` with ``values`` added at distinct row indices ``rows``."""
    rows = np.asarray(rows)
    if len(np.unique(rows)) != len(rows):
        raise ValueError("index_add requires distinct rows")
    out = base.data.copy()
    out[rows] += values.data
    return _result(out, (base, values), lambda g: (g, g[rows]))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


# --- linear algebra --------------------------------------------------------


def _check_matmul(a: Tensor, b: Tensor) -> None:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")


def _matmul_vjp(ad: np.ndarray, bd: np.ndarray):
    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return vjp


def matmul(a, b) -> Tensor:
    """Matrix product accumulated in inner-index order.

    Every entry is ``((a0*b0 + a1*b1) + a2*b2) + ...`` with one rounding per
    step, so results are reproducible bit-for-bit against a scalar loop. Use
    :func:`bmm` or :func:`linear` where BLAS speed matters more.
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_matmul(a, b)
    ad, bd = a.data, b.data
    acc = ad[..., :, 0:1] * bd[..., 0:1, :]
    for q in range(1, ad.shape[-1]):
        acc = acc + ad[..., :, q : q + 1] * bd[..., q : q + 1, :]
    return _result(acc, (a, b), _matmul_vjp(ad, bd))


def bmm(a, b) -> Tensor:
    """BLAS-backed (batched) matrix product; leading dimensions act as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    _check_matmul(a, b)
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), _matmul_vjp(ad, bd))


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for weights stored as [out, in]."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    xd, wd = x.data, w.data

    def vjp(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        return gx, gw

    return _result(xd @ wd.T, (x, w), vjp)


# --- normalized functions --------------------------------------------------


def _softmax_array(v: np.ndarray, axis: int = -1) -> np.ndarray:
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(v, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    v = as_tensor(v) if not isinstance(v, Tensor) else v
    if v.data.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty input")
    p = _softmax_array(v.data, axis)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (v,), vjp)


def logsumexp(v: Tensor, axis: int = -1) -> Tensor:
    m = v.data.max(axis=axis, keepdims=True)
    s = np.exp(v.data - m).sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    p = np.exp(v.data - m) / s

    def vjp(g):
        return (np.expand_dims(g, axis) * p,)

    return _result(out, (v,), vjp)


def rmsnorm(x: Tensor, w: Tensor, eps: float = 1e-6) -> Tensor:
    xd, wd = x.data, w.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xn = xd * inv
    d = xd.shape[-1]

    def vjp(g):
        gw = (g * xn).reshape(-1, d).sum(axis=0)
        gxn = g * wd
        gx = inv * (gxn - xn * (gxn * xn).sum(axis=-1, keepdims=True) / d)
        return gx, gw

    return _result(xn * wd, (x, w), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean next-token cross-entropy over rows of ``logits`` [N, V]."""
    ld = logits.data
    targets = np.asarray(targets).reshape(-1)
    if ld.ndim != 2 or ld.shape[0] != targets.shape[0]:
        raise ValueError(f"cross_entropy shape mismatch: {ld.shape} vs {targets.shape}")
    mask = np.ones(targets.shape[0], dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy has no valid targets")
    safe_t = np.where(mask, targets, 0)
    m = ld.max(axis=1, keepdims=True)
    e = np.exp(ld - m)
    s = e.sum(axis=1, keepdims=True)
    logp = ld - m - np.log(s)
    nll = -logp[np.arange(len(safe_t)), safe_t]
    loss = float((nll * mask).sum() / count)

    def vjp(g):
        p = e / s
        p[np.arange(len(safe_t)), safe_t] -= 1.0
        p *= (mask / count)[:, None]
        return (p * g,)

    return _result(np.asarray(loss), (logits,), vjp)


# --- plain helpers ---------------------------------------------------------


def cosine_similarity(a, b) -> float:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=DTYPE).reshape(-1)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=DTYPE).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in arrays))
