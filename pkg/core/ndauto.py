"""
ndauto - dense numpy tensors with tape-based reverse-mode autodiff.

The tape is explicit: parameters are registered with ``Tape.watch`` and every
operation whose inputs belong to a tape records a vector-Jacobian product on
it. Results of operations on untaped inputs are plain constants.

    tape = Tape()
    w = tape.watch(Tensor(np.array([1.0, 2.0])))
    loss = (w * w).sum()
    backward(loss)          # w.grad == [2., 4.]
    tape.release()
"""
import logging
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_expit, logsumexp as _logsumexp

from core.errors import DimensionError, PrecisionError, StateError

logger = logging.getLogger(__name__)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """n-dimensional float32/float64 array, optionally attached to a Tape."""

    __slots__ = ("data", "tape", "grad_id", "grad", "name")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.dtype not in FLOAT_DTYPES:
            raise DimensionError(f"Unsupported dtype {arr.dtype}; expected float32 or float64")
        self.data: np.ndarray = arr
        self.tape: Optional["Tape"] = None
        self.grad_id: Optional[int] = None
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        taped = " taped" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{taped})"


class _Record:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: Tensor, parents: Tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations, replayed in reverse by backward()."""

    def __init__(self):
        self._records: List[_Record] = []
        self._watched: List[Tensor] = []

    def __len__(self) -> int:
        return len(self._records)

    @property
    def watched(self) -> List[Tensor]:
        return list(self._watched)

    def watch(self, t: Tensor) -> Tensor:
        """Register a leaf tensor; it receives a gradient on backward()."""
        if t.tape is not None and t.tape is not self:
            raise StateError(f"Tensor {t.name or ''} is already watched by another tape")
        if t.tape is None:
            t.tape = self
            t.grad_id = len(self._watched)
            self._watched.append(t)
        return t

    def watch_all(self, tensors: Iterable[Tensor]) -> None:
        for t in tensors:
            self.watch(t)

    def record(self, out: Tensor, parents: Tuple[Tensor, ...], vjp: Callable) -> Tensor:
        out.tape = self
        self._records.append(_Record(out, parents, vjp))
        return out

    def backward(self, loss: Tensor) -> None:
        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.vjp(g)):
                if pg is None or parent.tape is not self:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for t in self._watched:
            g = grads.get(id(t))
            if g is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad = np.array(np.broadcast_to(g, t.shape), dtype=t.dtype)

    def release(self) -> None:
        """Detach watched tensors and drop recorded state."""
        for t in self._watched:
            t.tape = None
            t.grad_id = None
        self._watched.clear()
        self._records.clear()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor watched by the loss's tape."""
    if loss.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise StateError("backward() called on a tensor that is not on an active tape")
    loss.tape.backward(loss)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise StateError("Operation mixes tensors from different tapes")
    return tape


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = _tape_of(*parents)
    if tape is not None:
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in items)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def tensor(data, dtype=None, name: Optional[str] = None) -> Tensor:
    return Tensor(data, dtype=dtype, name=name)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# linear algebra & elementwise arithmetic
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` may batch a 2-D ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul dtype mismatch: {a.dtype} x {b.dtype}")
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b_data, -1, -2))
        if b_data.ndim == 2 and a_data.ndim > 2:
            gb = a_data.reshape(-1, a_data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return ga, gb

    return _result(_matmul_rows(a_data, b_data), (a, b), vjp)


def _matmul_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # one vector-matrix product per row: gemm blocks rows by call size, so a row's bits
    # would otherwise depend on how many rows (routed tokens) share the call
    out = np.matmul(a[..., None, :], np.expand_dims(b, -3))
    return np.ascontiguousarray(out[..., 0, :])


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    a_data, b_data = a.data, b.data
    return _result(a_data * b_data, (a, b),
                   lambda g: (_unbroadcast(g * b_data, a_data.shape),
                              _unbroadcast(g * a_data, b_data.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    a_data, b_data = a.data, b.data
    return _result(a_data / b_data, (a, b),
                   lambda g: (_unbroadcast(g / b_data, a_data.shape),
                              _unbroadcast(-g * a_data / (b_data * b_data), b_data.shape)))


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def power(x: Tensor, p: float) -> Tensor:
    x_data = x.data
    return _result(x_data ** p, (x,), lambda g: (g * p * x_data ** (p - 1),))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the gate nonlinearity of SwiGLU."""
    x_data = x.data
    s = expit(x_data)
    return _result(x_data * s, (x,), lambda g: (g * s * (1 + x_data * (1 - s)),))


def log_sigmoid(x: Tensor) -> Tensor:
    x_data = x.data
    return _result(log_expit(x_data), (x,), lambda g: (g * expit(-x_data),))


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max-subtraction."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"row_softmax needs a non-empty last axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), vjp)


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"logsumexp needs a non-empty last axis, got shape {x.shape}")
    x_data = x.data
    out = _logsumexp(x_data, axis=-1)

    def vjp(g):
        return (g[..., None] * np.exp(x_data - out[..., None]),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"log_softmax needs a non-empty last axis, got shape {x.shape}")
    x_data = x.data
    out = x_data - _logsumexp(x_data, axis=-1, keepdims=True)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out.astype(x.dtype, copy=False), (x,), vjp)


# ---------------------------------------------------------------------------
# reductions & shape
# ---------------------------------------------------------------------------

def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise DimensionError(f"mean over an empty extent of shape {x.shape}")
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


# ---------------------------------------------------------------------------
# gather / scatter
# ---------------------------------------------------------------------------

def take(x: Tensor, key) -> Tensor:
    """x[key] with basic or advanced indexing; repeated indices accumulate on backward."""
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(key)

    def vjp(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _result(np.array(x.data[key]), (x,), vjp)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; ids may have any shape."""
    return take(weight, np.asarray(ids))


def scatter_rows(src: Tensor, index: np.ndarray, length: int) -> Tensor:
    """out[length, ...] with out[index[i]] += src[i]."""
    index = np.asarray(index)
    if src.shape[0] != index.shape[0]:
        raise DimensionError(f"scatter_rows: {src.shape[0]} rows but {index.shape[0]} indices")
    out = np.zeros((length,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, index, src.data)
    return _result(out, (src,), lambda g: (g[index],))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors along axis 0; trailing shapes and dtypes must agree."""
    if not parts:
        raise DimensionError("concat_rows needs at least one tensor")
    tail, dtype = parts[0].shape[1:], parts[0].dtype
    for p in parts:
        if p.shape[1:] != tail or p.dtype != dtype:
            raise DimensionError(f"concat_rows: {p.shape}/{p.dtype} does not match {tail}/{dtype}")
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=0)
    return _result(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=0)))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with a constant."""
    mask = np.asarray(mask, dtype=bool)
    shape = x.shape
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return _result(out, (x,), lambda g: (_unbroadcast(np.where(mask, 0, g), shape),))


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive pairs (2j, 2j+1) of the last axis by the given angles."""
    if x.shape[-1] % 2:
        raise DimensionError(f"rotate_pairs needs an even last axis, got shape {x.shape}")
    x_data = x.data
    xe, xo = x_data[..., 0::2], x_data[..., 1::2]
    out = np.empty_like(x_data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def vjp(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        return (gx,)

    return _result(out, (x,), vjp)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Optional[Iterable[Tuple[int, ...]]] = None,
) -> float:
    """
    Compare the taped gradient of scalar ``f`` at ``x`` against central differences.

    The step for element i is eps * max(1, |x_i|), rounded to a representable
    difference so the quotient divides by the step actually taken. Returns the
    max over checked elements of
    |analytic - central| / max(|analytic|, |central|, 1e-12).
    ``indices`` restricts the check to a subset of coordinates.
    """
    if x.dtype != np.float64:
        raise PrecisionError(f"grad_check requires float64, got {x.dtype}")
    base = np.array(x.data, copy=True)

    tape = Tape()
    point = tape.watch(Tensor(base.copy()))
    backward(f(point))
    analytic = point.grad
    tape.release()

    coords = list(indices) if indices is not None else list(np.ndindex(base.shape))
    worst = 0.0
    for idx in coords:
        plus, minus = base.copy(), base.copy()
        step = eps * max(1.0, abs(float(base[idx])))
        plus[idx] += step
        minus[idx] -= step
        width = float(plus[idx]) - float(minus[idx])
        central = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / width
        a = float(analytic[idx])
        err = abs(a - central) / max(abs(a), abs(central), 1e-12)
        worst = max(worst, err)
    logger.debug(f"grad_check over {len(coords)} elements: max relative error {worst:.3e}")
    return worst
