"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the forecaster needs are provided. Ops record onto the
innermost active :class:`Tape` whenever one of their inputs requires a
gradient; :meth:`Tape.backward` replays the records in reverse order.

    >>> w = Tensor([0.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = softplus(w).sum()
    >>> tape.backward(loss)[w]
    array([0.5])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_FILL = -1e30
LN_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class AllMaskedError(ValueError):
    """A softmax row has no unmasked position."""


class NonFiniteGradientError(FloatingPointError):
    """An optimizer received a NaN/Inf gradient."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------- tape


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable ops executed while the tape is active."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Return d(loss)/d(x) for every requires_grad tensor reachable from ``loss``.

        Leaf tensors (those not produced by a recorded op) also get ``.grad`` set.
        """
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise FloatingPointError(f"loss is not finite: {float(loss.data.ravel()[0])}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        keep: dict[int, Tensor] = {id(loss): loss}
        produced: set[int] = set()
        for rec in reversed(self.records):
            produced.add(id(rec.out))
            g = grads.get(id(rec.out))
            if g is None:
                continue
            for x, gx in zip(rec.inputs, rec.backward(g)):
                if gx is None or not x.requires_grad:
                    continue
                k = id(x)
                if k in grads:
                    grads[k] = grads[k] + gx
                else:
                    grads[k] = gx
                    keep[k] = x
        out = {keep[k]: g for k, g in grads.items()}
        for t, g in out.items():
            if id(t) not in produced:
                t.grad = g
        return out


_ACTIVE: list[Tape] = []


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    if _ACTIVE and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        _ACTIVE[-1].records.append(_Record(out, inputs, fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def reciprocal(a: Tensor) -> Tensor:
    y = 1.0 / a.data
    return _record(y, (a,), lambda g: (-g * y * y,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def power(a: Tensor, k: int) -> Tensor:
    """Integer power; non-negative integers only so the rule is defined everywhere."""
    if int(k) != k or k < 0:
        raise ValueError(f"power supports non-negative integer exponents, got {k}")
    k = int(k)
    ad = a.data
    if k == 0:
        return Tensor(np.ones_like(ad))
    return _record(ad**k, (a,), lambda g: (k * g * ad ** (k - 1),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,))


def expm1(a: Tensor) -> Tensor:
    y = np.expm1(a.data)
    return _record(y, (a,), lambda g: (g * (y + 1.0),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), overflow safe; derivative is the logistic function."""
    x = a.data
    y = np.logaddexp(0.0, x)
    return _record(y, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# --------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _record(ad @ bd, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) over the last axis of ``x``."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ----------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- shape


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def _basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _basic_index(idx)

    def back(g):
        z = np.zeros(shape)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _record(a.data[idx], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    n = len(tensors)
    return _record(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]``; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def back(g):
        z = np.zeros(shape)
        np.add.at(z, idx.ravel(), g.reshape(-1, shape[-1]))
        return (z,)

    return _record(table.data[idx], (table,), back)


# ---------------------------------------------------------- composites


def masked_softmax(scores: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` is True where a position is valid.

    Invalid positions get an additive ``MASK_FILL`` so their weight and the
    gradient flowing into their score are exactly zero.
    """
    x = scores.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise AllMaskedError("softmax row with every position masked (no valid history)")
        x = x + np.where(mask, 0.0, MASK_FILL)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (scores,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs a last axis of size >= 2, got {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gd + bias.data, (x, gain, bias), back)


def pair_scores(a: Tensor, b: Tensor, bias: Tensor, w: Tensor) -> Tensor:
    """Additive pair scoring ``tanh(a_i + b_j + bias) @ w`` for every (i, j).

    ``a`` is [..., I, n], ``b`` is [..., J, n], ``w`` is [n, 1]; the result is
    [..., I, J]. Fused so the [..., I, J, n] hidden tensor is built once.
    """
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1] or w.shape != (a.shape[-1], 1):
        raise DimensionError(f"pair_scores shapes {a.shape}, {b.shape}, {bias.shape}, {w.shape}")
    z = np.tanh(a.data[..., :, None, :] + b.data[..., None, :, :] + bias.data)
    wv = w.data[:, 0]

    def back(g):
        du = g[..., None] * wv * (1.0 - z * z)
        lead = tuple(range(du.ndim - 1))
        return (
            du.sum(axis=-2),
            du.sum(axis=-3),
            du.sum(axis=lead),
            np.tensordot(z, g, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))[:, None],
        )

    return _record(z @ wv, (a, b, bias, w), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ------------------------------------------------------------ optimizer


class Adam:
    """Adam with bias correction; never touches names in ``frozen``."""

    def __init__(
        self,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = None,
    ):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(
        self,
        params: dict[str, Tensor],
        grads: dict[str, np.ndarray],
        frozen: Iterable[str] = (),
    ) -> None:
        frozen = set(frozen)
        live = {k: g for k, g in grads.items() if k not in frozen and g is not None}
        for k, g in live.items():
            if not np.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient for parameter {k!r}")
        scale = 1.0
        if self.clip_norm is not None and live:
            norm = float(np.sqrt(sum(float((g * g).sum()) for g in live.values())))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in live.items():
            g = g * scale
            m = self.b1 * self.m.get(k, 0.0) + (1.0 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1.0 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            p = params[k]
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}
