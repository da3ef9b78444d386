"""Dense numpy tensors with an explicit reverse-mode tape.

Recording only happens while a :class:`Tape` is active::

    with Tape() as tape:
        loss = mse(model(x), y)
    tape.backward(loss)

Outside a tape every op is a plain forward computation, which is how frozen
teachers and feature extraction run.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32


class NumericError(ArithmeticError):
    """Raised when a kernel sees or produces NaN/Inf."""


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, so replaying them in reverse is
    a valid topological order for the backward pass.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
        if seed is None:
            if loss.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        produced = {id(r.out) for r in self.records}
        if id(loss) not in produced and not loss.requires_grad:
            raise ContractError("backward: loss was not computed on this tape (was it built outside `with Tape()`?)")
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    # leaf: flush straight into .grad
                    gl = grads.pop(key)
                    t.grad = gl.astype(t.dtype, copy=True) if t.grad is None else t.grad + gl
        if id(loss) in grads and loss.requires_grad and id(loss) not in produced:
            loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]


class no_grad:
    """Suspend recording on every active tape."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)


def recording() -> bool:
    return bool(_ACTIVE)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values")


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].records.append(_Record(out, tuple(inputs), backward))
    return out


def _same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _same_dtype(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _same_dtype(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _same_dtype(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _same_dtype(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    ad = a.data
    return _make(np.maximum(ad, lo).astype(ad.dtype), (a,), lambda g: (g * (ad > lo),), "clamp_min")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),), "relu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    _check_finite(a.data, "gelu")
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype)

    def back(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return _make(out, (a,), back, "gelu")


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise ContractError("mean over an empty axis")
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    if isinstance(index, np.ndarray) and index.dtype == bool:
        index = np.nonzero(index)
    shape, dtype = a.shape, a.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.asarray(a.data[index]), (a,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _same_dtype(tensors[0], t, "concat")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),), "broadcast_to")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules (1-D operands not supported)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    _same_dtype(a, b, "matmul")
    ad, bd = a.data, b.data

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return _make(np.matmul(ad, bd), (a, b), back, "matmul")


# ---------------------------------------------------------------------------
# fused kernels
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite(a.data, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite(a.data, "log_softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), back, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise ContractError("layer_norm over an empty axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ContractError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs last dim {d}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    _check_finite(x.data, "layer_norm")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    with np.errstate(over="ignore"):
        var = (xc * xc).mean(axis=-1, keepdims=True)
    _check_finite(var, "layer_norm variance")
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def back(g):
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        dbeta = g.sum(axis=red) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gx = g * gd
            dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out.astype(xd.dtype), (x, gamma, beta), back, "layer_norm")


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements; ``target`` is treated as a constant."""
    target = _lift(target, pred)
    if pred.shape != target.shape:
        raise ContractError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    _check_finite(target.data, "mse")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return _make(out, (pred,), lambda g: (g * 2.0 * diff / n,), "mse")


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits[..., K]`` against integer labels."""
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if labels.shape != logits.shape[:-1]:
        raise ContractError(f"softmax_ce: labels {labels.shape} vs logits {logits.shape}")
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"softmax_ce: label out of range [0, {k})")
    _check_finite(logits.data, "softmax_ce")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    flat = logp.reshape(-1, k)
    idx = labels.reshape(-1).astype(np.int64)
    n = idx.size
    out = np.asarray(-flat[np.arange(n), idx].sum() / n, dtype=logits.dtype)

    def back(g):
        p = np.exp(flat)
        p[np.arange(n), idx] -= 1.0
        return ((g * p / n).reshape(logits.shape),)

    return _make(out, (logits,), back, "softmax_ce")


def soft_ce(logits: Tensor, target_probs, axis: int = -1) -> Tensor:
    """Per-row cross-entropy -sum(p * log_softmax(logits)); ``target_probs`` is constant."""
    p = np.asarray(target_probs.data if isinstance(target_probs, Tensor) else target_probs,
                   dtype=logits.dtype)
    return scale(tsum(mul(log_softmax(logits, axis), Tensor(p)), axis=axis), -1.0)


# ---------------------------------------------------------------------------
# checking
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences.

    The denominator is ``max(|analytic|, |numeric|, 1e-8)`` elementwise.
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    if not isinstance(y, Tensor) or y.size != 1:
        raise ContractError("grad_check: fn must return a scalar tensor")
    tape.backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        xp = base.copy().reshape(-1)
        xm = base.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        fp = fn(Tensor(xp.reshape(base.shape))).item()
        fm = fn(Tensor(xm.reshape(base.shape))).item()
        flat[i] = (fp - fm) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
