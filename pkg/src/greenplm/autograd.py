"""A small dense-tensor engine with reverse-mode differentiation.

Only what the projector, the LoRA adapters and the toy decoder need is here:
matmul, elementwise arithmetic, GeLU, softmax, layer norm, concat, slicing,
reductions, gather and a fused cross-entropy. Broadcasting is limited to
leading batch dimensions: the smaller operand must match the trailing shape
of the larger one exactly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: incompatible shapes {a} and {b}")
        self.shapes = (a, b)


class NonFiniteError(FloatingPointError):
    pass


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1 or self.data.ndim != 0:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._backward is None and not self.requires_grad:
            raise ValueError("loss is not attached to a recorded graph")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    @property
    def T(self):
        axes = tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2)
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_broadcast(op: str, a: tuple, b: tuple) -> None:
    if a == b:
        return
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return
    raise DimensionError(op, a, b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim == 0:
            return _make(a.data * c, (a,), lambda g: (g * c,))
        b = Tensor(c, dtype=a.dtype)
    _check_broadcast("mul", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _make(ad * bd, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GeLU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = (x * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _make(y, (a,), backward)


# -- linear algebra ----------------------------------------------------------

def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a of shape (..., n, k) and b of shape (k, m) or (..., k, m)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ _swap(bd) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _swap(ad) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


# -- normalisation / attention pieces ---------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError("layer_norm", x.shape, gamma.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _make(y.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty list")
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, backward)


def getitem(a: Tensor, idx) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward)


def gather(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` for an integer index array (embedding)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape, dtype = table.shape, table.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _make(table.data[idx], (table,), backward)


# -- reductions --------------------------------------------------------------

def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (np.array(_expand(g, shape, axis, keepdims)),))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    count = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (np.array(_expand(g, shape, axis, keepdims)) / count,))


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry."""
    x = a.data
    if axis is None:
        flat = int(np.argmax(x))

        def backward_all(g):
            full = np.zeros_like(x)
            full.flat[flat] = g
            return (full,)

        y = x.max(keepdims=keepdims)
        return _make(y, (a,), backward_all)
    ax = axis % x.ndim
    arg = np.expand_dims(np.argmax(x, axis=ax), ax)
    y = np.take_along_axis(x, arg, axis=ax)

    def backward(g):
        full = np.zeros_like(x)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(full, arg, gk, axis=ax)
        return (full,)

    return _make(y if keepdims else np.squeeze(y, ax), (a,), backward)


# -- loss --------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean next-token cross-entropy over positions where ``mask`` is set.

    logits: (..., V); targets: integer array (...); mask: bool/float array (...).
    """
    x = logits.data
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != x.shape[:-1]:
        raise DimensionError("cross_entropy", x.shape, t.shape)
    w = np.ones(t.shape, dtype=x.dtype) if mask is None else np.asarray(mask, dtype=x.dtype)
    count = w.sum()
    if count <= 0:
        raise ValueError("cross_entropy mask selects no positions")
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / count

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, t[..., None], np.take_along_axis(p, t[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (w[..., None] * (g / count)),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), backward)


# -- checks ------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], theta: Tensor, h: float | None = None,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated with ``theta.data`` perturbed in place; it must read
    ``theta`` each call. ``h`` defaults to ``1e-5 * max(1, |theta_i|)``.
    ``coords`` restricts the check to a subset of flat indices.
    """
    theta.grad = None
    theta.requires_grad = True
    loss = f()
    loss.backward()
    if theta.grad is None:
        analytic = np.zeros_like(theta.data).reshape(-1)
    else:
        analytic = theta.grad.reshape(-1).astype(np.float64)
    flat = theta.data.reshape(-1)
    idxs = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idxs:
        orig = flat[i]
        step = h if h is not None else 1e-5 * max(1.0, abs(float(orig)))
        flat[i] = orig + step
        fp = float(f().data)
        flat[i] = orig - step
        fm = float(f().data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        if not (math.isfinite(fp) and math.isfinite(fm) and math.isfinite(analytic[i])):
            raise NonFiniteError(f"non-finite value at coordinate {i}")
        err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, err)
    return worst


# -- optimiser ---------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay over a name -> Tensor mapping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def reset(self) -> None:
        self.step_count = 0
        for k in self.m:
            self.m[k][...] = 0
            self.v[k][...] = 0

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = np.array(tensors[f"opt.m.{k}"], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(tensors[f"opt.v.{k}"], dtype=self.params[k].data.dtype)
        self.step_count = step_count
