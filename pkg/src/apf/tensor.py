"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are numpy arrays; every differentiable operation returns a new
``Tensor`` carrying a closure that maps the output gradient back onto the
operands.  ``backward`` walks the implicit graph in reverse topological
order and accumulates gradients on the leaves, so parameters keep their
gradients across repeated calls until ``zero_grad``.

The model this supports is small, so the implementation favors clarity:
no views, no dtype zoo, no broadcasting rules beyond numpy's, and a
finiteness check on every constructed value.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ConfigError, NumericError, ShapeError

# per-thread so concurrent inference cannot switch the tape off for everyone
_GRAD_STATE = threading.local()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A float64 array plus the tape links used for differentiation.

    Leaves are constructed directly (optionally with ``requires_grad``);
    interior nodes are built by the operations below.  Construction rejects
    NaN and infinity so numeric failures surface where they happen, not
    three layers later.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def is_grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, evaluation)."""
    prev = is_grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = prev


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires-grad leaf.

    ``loss`` must be scalar-valued.  Repeated calls keep accumulating; call
    ``zero_grad`` (or ``Parameters.zero_grad``) between optimization steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise ShapeError(
                    f"gradient shape {pg.shape} does not match operand shape {parent.data.shape}"
                )
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g.reshape(shape))


def _broadcast_binary(a, b, forward, vjp_pair):
    a, b = _coerce(a), _coerce(b)
    try:
        out = forward(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"operands {a.shape} and {b.shape} do not broadcast") from exc

    def vjp(g):
        ga, gb = vjp_pair(g, a.data, b.data, out)
        ga = None if ga is None else _unbroadcast(ga, a.shape)
        gb = None if gb is None else _unbroadcast(gb, b.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


def add(a, b) -> Tensor:
    return _broadcast_binary(a, b, np.add, lambda g, x, y, o: (g, g))


def sub(a, b) -> Tensor:
    return _broadcast_binary(a, b, np.subtract, lambda g, x, y, o: (g, -g))


def mul(a, b) -> Tensor:
    return _broadcast_binary(a, b, np.multiply, lambda g, x, y, o: (g * y, g * x))


def div(a, b) -> Tensor:
    return _broadcast_binary(a, b, np.divide, lambda g, x, y, o: (g / y, -g * x / (y * y)))


def neg(a) -> Tensor:
    a = _coerce(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (m,k) @ (k,n), got {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), vjp)


def bmm(a, b) -> Tensor:
    """Batched matmul over a shared leading axis: (B,m,k) @ (B,k,n)."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm expects (B,m,k) @ (B,k,n), got {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return _node(out, (a, b), vjp)


def tensor_sum(a) -> Tensor:
    """Sum of all elements, as a shape-(1,) scalar tensor."""
    a = _coerce(a)
    out = np.asarray(np.sum(a.data))

    def vjp(g):
        return (np.full(a.shape, g.reshape(-1)[0]),)

    return _node(out, (a,), vjp)


def mean(a) -> Tensor:
    a = _coerce(a)
    n = a.size
    out = np.asarray(np.sum(a.data) / n)

    def vjp(g):
        return (np.full(a.shape, g.reshape(-1)[0] / n),)

    return _node(out, (a,), vjp)


def sum_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.ascontiguousarray(np.broadcast_to(gg, a.shape)),)

    return _node(out, (a,), vjp)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _coerce(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _node(out, (a,), vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _coerce(a)
    out = np.reshape(a.data, shape)

    def vjp(g):
        return (np.ascontiguousarray(np.reshape(g, a.shape)),)

    return _node(out, (a,), vjp)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return _node(out, parts, vjp)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather rows along axis 0 (the only axis the model needs)."""
    if axis != 0:
        raise ShapeError("take supports axis 0 only")
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return _node(out, (a,), vjp)


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _node(a.data * mask, (a,), vjp)


def gelu(a) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    a = _coerce(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (cdf + a.data * pdf),)

    return _node(out, (a,), vjp)


def activation(a, kind: str = "gelu") -> Tensor:
    if kind == "gelu":
        return gelu(a)
    if kind == "relu":
        return relu(a)
    raise ConfigError(f"unknown activation kind {kind!r}; expected 'gelu' or 'relu'")


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    y = expit(a.data)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _node(y, (a,), vjp)


def softplus(a) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    a = _coerce(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        return (g * expit(a.data),)

    return _node(out, (a,), vjp)


def absolute(a) -> Tensor:
    a = _coerce(a)
    sign = np.sign(a.data)

    def vjp(g):
        return (g * sign,)

    return _node(np.abs(a.data), (a,), vjp)


def pow_const(a, exponent: float) -> Tensor:
    a = _coerce(a)
    out = np.power(a.data, exponent)

    def vjp(g):
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return _node(out, (a,), vjp)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _coerce(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * inside,)

    return _node(out, (a,), vjp)


def minimum(a, b) -> Tensor:
    # ties route the gradient to the first operand
    def pair(g, x, y, o):
        first = x <= y
        return g * first, g * ~first

    return _broadcast_binary(a, b, np.minimum, pair)


def maximum(a, b) -> Tensor:
    def pair(g, x, y, o):
        first = x >= y
        return g * first, g * ~first

    return _broadcast_binary(a, b, np.maximum, pair)


def softmax_lastdim(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked entries are exactly zero.

    ``mask`` is boolean with ``True`` marking valid entries.  A row with no
    valid entry has no well-defined distribution, so it raises.
    """
    a = _coerce(a)
    if mask is None:
        m = np.max(a.data, axis=-1, keepdims=True)
        e = np.exp(a.data - m)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match input shape {a.shape}")
        if not np.all(np.any(mask, axis=-1)):
            raise NumericError("softmax row is fully masked")
        neg = np.where(mask, a.data, -np.inf)
        m = np.max(neg, axis=-1, keepdims=True)
        # exponentiate only valid entries to keep masked garbage out of range
        e = np.where(mask, np.exp(np.where(mask, a.data, m) - m), 0.0)
    s = np.sum(e, axis=-1, keepdims=True)
    y = e / s

    def vjp(g):
        inner = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _node(y, (a,), vjp)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    a, gamma, beta = _coerce(a), _coerce(gamma), _coerce(beta)
    dim = a.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match last axis {dim}"
        )
    mu = np.mean(a.data, axis=-1, keepdims=True)
    var = np.mean((a.data - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gg = g * gamma.data
        m1 = np.mean(gg, axis=-1, keepdims=True)
        m2 = np.mean(gg * xhat, axis=-1, keepdims=True)
        da = inv * (gg - m1 - xhat * m2)
        dgamma = (g * xhat).reshape(-1, dim).sum(axis=0)
        dbeta = g.reshape(-1, dim).sum(axis=0)
        return da, dgamma, dbeta

    return _node(out, (a, gamma, beta), vjp)


def gather_time(a, indices: np.ndarray) -> Tensor:
    """Gather along axis 1: (H,T,D) with integer indices (T,S) -> (H,T,S,D)."""
    a = _coerce(a)
    if a.ndim != 3 or indices.ndim != 2:
        raise ShapeError(f"gather_time expects (H,T,D) and (T,S), got {a.shape} and {indices.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[:, idx, :]
    heads, _, dim = a.shape

    def vjp(g):
        da = np.zeros_like(a.data)
        flat = idx.ravel()
        for h in range(heads):
            np.add.at(da[h], flat, g[h].reshape(-1, dim))
        return (da,)

    return _node(out, (a,), vjp)


def window_dots(q, kw) -> Tensor:
    """Per-slot query-key dot products: (H,T,D) x (H,T,S,D) -> (H,T,S)."""
    q, kw = _coerce(q), _coerce(kw)
    if q.ndim != 3 or kw.ndim != 4 or q.shape != (kw.shape[0], kw.shape[1], kw.shape[3]):
        raise ShapeError(f"window_dots got incompatible shapes {q.shape} and {kw.shape}")
    out = np.einsum("htd,htsd->hts", q.data, kw.data)

    def vjp(g):
        dq = np.einsum("hts,htsd->htd", g, kw.data)
        dkw = q.data[:, :, None, :] * g[..., None]
        return dq, dkw

    return _node(out, (q, kw), vjp)


def window_mix(weights, vw) -> Tensor:
    """Weighted sum of slot values: (H,T,S) x (H,T,S,D) -> (H,T,D)."""
    weights, vw = _coerce(weights), _coerce(vw)
    if weights.ndim != 3 or vw.ndim != 4 or weights.shape != vw.shape[:3]:
        raise ShapeError(f"window_mix got incompatible shapes {weights.shape} and {vw.shape}")
    out = np.einsum("hts,htsd->htd", weights.data, vw.data)

    def vjp(g):
        dw = np.einsum("htd,htsd->hts", g, vw.data)
        dvw = weights.data[..., None] * g[:, :, None, :]
        return dw, dvw

    return _node(out, (weights, vw), vjp)


def cosine_weights(q, anchors: np.ndarray, valid: np.ndarray) -> Tensor:
    """Cosine similarity between each query row and anchor rows of itself.

    ``q`` is (H,T,D); ``anchors`` is integer (T,J) giving, per position, the J
    anchor positions; ``valid`` is boolean (T,J).  Output is (H,T,J) with
    invalid anchors and zero-norm pairs contributing exactly 0.
    """
    q = _coerce(q)
    if q.ndim != 3 or anchors.shape != valid.shape or anchors.ndim != 2:
        raise ShapeError(f"cosine_weights got shapes {q.shape}, {anchors.shape}, {valid.shape}")
    heads, length, dim = q.shape
    idx = np.clip(np.asarray(anchors, dtype=np.intp), 0, length - 1)
    ok_pos = np.asarray(valid, dtype=bool)[None, :, :]

    b = q.data[:, idx, :]
    dots = np.einsum("htd,htjd->htj", q.data, b)
    norms = np.linalg.norm(q.data, axis=2)
    nb = norms[:, idx]
    denom = norms[:, :, None] * nb
    ok = ok_pos & (denom > 0.0)
    safe = np.where(ok, denom, 1.0)
    out = np.where(ok, dots / safe, 0.0)

    def vjp(g):
        ge = np.where(ok, g, 0.0)
        inv = np.where(ok, 1.0 / safe, 0.0)
        scaled = ge * inv
        dq = np.einsum("htj,htjd->htd", scaled, b)
        na2 = np.where(norms > 0.0, norms, 1.0) ** 2
        dq -= np.sum(ge * out, axis=2)[:, :, None] * q.data / na2[:, :, None]
        nb2 = np.where(nb > 0.0, nb, 1.0) ** 2
        danchor = scaled[..., None] * q.data[:, :, None, :]
        danchor -= (ge * out / nb2)[..., None] * b
        flat = idx.ravel()
        for h in range(heads):
            np.add.at(dq[h], flat, danchor[h].reshape(-1, dim))
        return (dq,)

    return _node(out, (q,), vjp)


def shift_time(a, offsets: np.ndarray) -> Tensor:
    """Shift each channel along time: out[h,t,d] = in[h, t - offsets[d], d].

    Positions shifted in from outside the sequence are zero.
    """
    a = _coerce(a)
    if a.ndim != 3 or np.asarray(offsets).shape != (a.shape[2],):
        raise ShapeError(f"shift_time expects (H,T,D) with one offset per channel, got {a.shape}")
    off = np.asarray(offsets, dtype=np.intp)
    length, dim = a.shape[1], a.shape[2]
    d_idx = np.broadcast_to(np.arange(dim)[None, :], (length, dim))

    def gathered(x, signed_off):
        src = np.arange(length)[:, None] - signed_off[None, :]
        ok = (src >= 0) & (src < length)
        return x[:, np.clip(src, 0, length - 1), d_idx] * ok

    out = gathered(a.data, off)

    def vjp(g):
        return (gathered(g, -off),)

    return _node(out, (a,), vjp)


def shift_channels(a, offsets: np.ndarray) -> Tensor:
    """Shift each time step along channels: out[h,t,d] = in[h, t, d - offsets[t]]."""
    a = _coerce(a)
    if a.ndim != 3 or np.asarray(offsets).shape != (a.shape[1],):
        raise ShapeError(f"shift_channels expects (H,T,D) with one offset per step, got {a.shape}")
    off = np.asarray(offsets, dtype=np.intp)
    length, dim = a.shape[1], a.shape[2]
    t_idx = np.broadcast_to(np.arange(length)[:, None], (length, dim))

    def gathered(x, signed_off):
        src = np.arange(dim)[None, :] - signed_off[:, None]
        ok = (src >= 0) & (src < dim)
        return x[:, t_idx, np.clip(src, 0, dim - 1)] * ok

    out = gathered(a.data, off)

    def vjp(g):
        return (gathered(g, -off),)

    return _node(out, (a,), vjp)


def shift_cols(a, steps: int) -> Tensor:
    """Shift all columns of a (C,T) matrix right by ``steps`` (zero fill)."""
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError(f"shift_cols expects a matrix, got {a.shape}")

    def shifted(x, k):
        out = np.zeros_like(x)
        width = x.shape[1]
        if k >= 0:
            if k < width:
                out[:, k:] = x[:, : width - k]
        else:
            if -k < width:
                out[:, : width + k] = x[:, -k:]
        return out

    out = shifted(a.data, steps)

    def vjp(g):
        return (shifted(g, -steps),)

    return _node(out, (a,), vjp)


class Parameters:
    """Named leaf tensors with accumulated gradients, in insertion order."""

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._store:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._store[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __len__(self) -> int:
        return len(self._store)

    def names(self) -> list[str]:
        return list(self._store)

    def items(self):
        return self._store.items()

    def zero_grad(self) -> None:
        for t in self._store.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self._store.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._store.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._store) - set(state)
        extra = set(state) - set(self._store)
        if missing or extra:
            raise ConfigError(f"parameter names differ: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, t in self._store.items():
            value = np.ascontiguousarray(state[name], dtype=np.float64)
            if value.shape != t.data.shape:
                raise ShapeError(f"parameter {name!r} has shape {t.data.shape}, state has {value.shape}")
            t.data = value


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], p: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to ``p``.

    Perturbs ``p.data`` in place coordinate by coordinate and restores it, so
    ``f`` may either use its argument or close over the same tensor.
    """
    flat = p.data.reshape(-1)
    grad = np.zeros_like(flat)

    def evaluate() -> float:
        res = f(p)
        return res.item() if isinstance(res, Tensor) else float(res)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate()
        flat[i] = orig - h
        fm = evaluate()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(p.data.shape)
