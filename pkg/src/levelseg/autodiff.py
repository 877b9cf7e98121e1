"""Reverse-mode differentiation over numpy arrays.

Every primitive in this module accepts either a :class:`Var` or a plain
array / scalar.  If any operand is a ``Var`` the result is recorded on that
operand's tape; otherwise the primitive evaluates eagerly and returns an
``ndarray``.  Code written against these functions therefore runs both ways
and the forward values agree bit for bit.

>>> tape = Tape()
>>> x = tape.var(np.full((2, 2), 3.0))
>>> loss = ad_sum(x * x)
>>> tape.backward(loss)[x]
array([[6., 6.],
       [6., 6.]])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import fields
from .fields import ETA, PadMode


class TapeError(ValueError):
    pass


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "id", "value")
    __array_ufunc__ = None  # make ndarray <op> Var defer to Var

    def __init__(self, tape: "Tape", id: int, value: np.ndarray):
        self.tape = tape
        self.id = id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape})"

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
        return true_div(self, other)

    def __rtruediv__(self, other):
        return true_div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)


class Gradients(dict):
    """Mapping from leaf ``Var`` to gradient array; unreachable leaves give zeros."""

    def __init__(self, tape: "Tape", adjoints: list):
        super().__init__()
        self._tape = tape
        self._adjoints = adjoints

    def __getitem__(self, var: Var) -> np.ndarray:
        if var.tape is not self._tape:
            raise TapeError("Var belongs to a different tape")
        g = self._adjoints[var.id]
        if g is None:
            return np.zeros_like(var.value, dtype=np.float64)
        return g


class Tape:
    """Append-only record of operations.

    Node ids are assigned in recording order, so inputs always precede the
    outputs computed from them and a reverse sweep over ids is a valid
    topological order.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple] = []
        self._backward: list[Callable | None] = []

    def __len__(self):
        return len(self._values)

    def var(self, value) -> Var:
        """Create a leaf holding a float64 copy of ``value``."""
        v = np.array(value, dtype=np.float64)
        return self._push(v, (), None)

    def _push(self, value, parents, backward) -> Var:
        node = Var(self, len(self._values), value)
        self._values.append(value)
        self._parents.append(parents)
        self._backward.append(backward)
        return node

    def backward(self, loss: Var) -> Gradients:
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeError("loss must be a Var recorded on this tape")
        if np.size(loss.value) != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
        adj: list = [None] * len(self._values)
        adj[loss.id] = np.ones_like(loss.value, dtype=np.float64)
        for i in range(loss.id, -1, -1):
            g = adj[i]
            fn = self._backward[i]
            if g is None or fn is None:
                continue
            parents = self._parents[i]
            for p, pg in zip(parents, fn(g)):
                if p is None or pg is None:
                    continue
                pg = _unbroadcast(pg, self._values[p].shape)
                adj[p] = pg if adj[p] is None else adj[p] + pg
        return Gradients(self, adj)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def value(x):
    """The numeric value of a Var, or ``x`` itself as an array."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _record(out, inputs: Sequence, backward):
    """Record ``out`` if any input is a Var, else return it unchanged."""
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands come from different tapes")
    if tape is None:
        return out
    parents = tuple(x.id if isinstance(x, Var) else None for x in inputs)
    return tape._push(out, parents, backward)


# ---------------------------------------------------------------------------
# pointwise arithmetic


def add(a, b):
    return _record(np.add(value(a), value(b)), (a, b), lambda g: (g, g))


def sub(a, b):
    return _record(np.subtract(value(a), value(b)), (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = value(a), value(b)
    ta, tb = isinstance(a, Var), isinstance(b, Var)
    return _record(np.multiply(av, bv), (a, b),
                   lambda g: (g * bv if ta else None, g * av if tb else None))


def _div_backward(a, b, den, out):
    ta, tb = isinstance(a, Var), isinstance(b, Var)
    return lambda g: (g / den if ta else None, -g * out / den if tb else None)


def true_div(a, b):
    av, bv = value(a), value(b)
    out = np.divide(av, bv)
    return _record(out, (a, b), _div_backward(a, b, bv, out))


def div(a, b, eta: float = ETA):
    """Guarded division ``a / (b + eta)``."""
    av = value(a)
    den = np.add(value(b), eta)
    out = np.divide(av, den)
    return _record(out, (a, b), _div_backward(a, b, den, out))


def scale(x, c: float):
    return mul(x, float(c))


def power(x, p: float):
    xv = value(x)
    out = np.power(xv, p)
    return _record(out, (x,), lambda g: (g * p * np.power(xv, p - 1),))


def square(x):
    xv = value(x)
    return _record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def exp(x):
    out = np.exp(value(x))
    return _record(out, (x,), lambda g: (g * out,))


def log(x):
    xv = value(x)
    return _record(np.log(xv), (x,), lambda g: (g / xv,))


def tanh(x):
    out = np.tanh(value(x))
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    xv = value(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x):
    xv = value(x)
    out = np.maximum(xv, 0.0)
    return _record(out, (x,), lambda g: (g * (xv > 0.0),))


def arctan(x):
    xv = value(x)
    return _record(np.arctan(xv), (x,), lambda g: (g / (1.0 + xv * xv),))


def absolute(x):
    xv = value(x)
    return _record(np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def sqrt(x):
    """Square root whose derivative is taken as 0 at x == 0."""
    xv = value(x)
    out = np.sqrt(xv)

    def back(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, 0.5 * g / safe, 0.0),)

    return _record(out, (x,), back)


def clip(x, lo: float, hi: float):
    xv = value(x)
    out = np.clip(xv, lo, hi)
    return _record(out, (x,), lambda g: (g * ((xv >= lo) & (xv <= hi)),))


def getitem(x, key):
    xv = value(x)
    out = np.array(xv[key], dtype=np.float64)

    def back(g):
        full = np.zeros_like(xv)
        np.add.at(full, key, g)
        return (full,)

    return _record(out, (x,), back)


def reshape(x, shape):
    xv = value(x)
    return _record(xv.reshape(shape), (x,), lambda g: (np.reshape(g, xv.shape),))


# ---------------------------------------------------------------------------
# reductions


def ad_sum(x, axis=None, keepdims: bool = False):
    xv = value(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape),)

    return _record(np.asarray(out, dtype=np.float64), (x,), back)


def ad_mean(x, axis=None, keepdims: bool = False):
    xv = value(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return scale(ad_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def spatial_sum(x):
    """Sum over the two trailing axes, kept as singleton axes for broadcasting."""
    return ad_sum(x, axis=(-2, -1), keepdims=True)


# ---------------------------------------------------------------------------
# linear grid operators


def stencil(x, axis: str, weights, pad: PadMode = PadMode.REPLICATE):
    out = fields.stencil(value(x), axis, weights, pad)
    return _record(out, (x,), lambda g: (fields.stencil_adjoint(g, axis, weights, pad),))


def central_diff(x, axis: str, pad: PadMode = PadMode.REPLICATE):
    out = fields.central_diff(value(x), axis, pad)
    return _record(out, (x,), lambda g: (fields.stencil_adjoint(g, axis, fields.CENTRAL, pad),))


def second_diffs(x, pad: PadMode = PadMode.REPLICATE):
    fields._require(value(x), 3)
    gxx = stencil(x, "x", fields.SECOND, pad)
    gyy = stencil(x, "y", fields.SECOND, pad)
    gxy = stencil(stencil(x, "x", fields.CENTRAL, pad), "y", fields.CENTRAL, pad)
    return gxx, gyy, gxy


def box_mean(x, f: int, pad: PadMode = PadMode.REPLICATE):
    out = fields.box_mean(value(x), f, pad)
    return _record(out, (x,), lambda g: (fields.box_mean_adjoint(g, f, pad),))


def box_sum(x, f: int, pad: PadMode = PadMode.REPLICATE):
    out = fields.box_sum(value(x), f, pad)
    return _record(out, (x,), lambda g: (fields.box_sum_adjoint(g, f, pad),))


def _patches(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # (..., C, H+2, W+2) -> (..., C, H, W, 3, 3) view
    return np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(-2, -1))[..., :h, :w, :, :]


def conv3x3(x, kernel, pad: PadMode = PadMode.ZERO):
    """Same-size 3x3 cross-correlation.

    ``x`` has shape (..., C_in, H, W); ``kernel`` has shape (C_out, C_in, 3, 3).
    Returns shape (..., C_out, H, W).
    """
    xv, kv = value(x), value(kernel)
    if kv.ndim != 4 or kv.shape[2:] != (3, 3):
        raise TapeError(f"kernel must be (C_out, C_in, 3, 3), got {kv.shape}")
    if xv.ndim < 3 or xv.shape[-3] != kv.shape[1]:
        raise TapeError(f"input channels {xv.shape} do not match kernel {kv.shape}")
    h, w = xv.shape[-2:]
    patches = _patches(fields.pad_grid(xv, 1, pad), h, w)
    out = np.einsum("...chwij,ocij->...ohw", patches, kv, optimize=True)

    def back(g):
        gk = np.einsum("...chwij,...ohw->ocij", patches, g, optimize=True)
        gpatch = np.einsum("ocij,...ohw->...chwij", kv, g, optimize=True)
        gp = np.zeros(xv.shape[:-2] + (h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                gp[..., i:i + h, j:j + w] += gpatch[..., i, j]
        return fields.pad_adjoint(gp, 1, pad), gk

    return _record(out, (x, kernel), back)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(program, leaves, h: float = 1e-3, n_samples: int = 64, seed: int = 0) -> float:
    """Compare tape gradients against central finite differences.

    ``program(*leaves)`` must return a scalar and be written with the
    primitives of this module, so that it runs on Vars and on plain arrays.
    Up to ``n_samples`` leaf coordinates are drawn at random (all of them if
    there are fewer) and the largest relative error
    ``|g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-6)`` is returned.
    """
    leaves = [np.array(x, dtype=np.float64) for x in leaves]
    tape = Tape()
    vars_ = [tape.var(x) for x in leaves]
    grads = tape.backward(program(*vars_))
    tape_grads = [grads[v] for v in vars_]

    coords = [(i, j) for i, x in enumerate(leaves) for j in range(x.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_samples:
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in coords:
        plus = [x.copy() for x in leaves]
        minus = [x.copy() for x in leaves]
        plus[i].flat[j] += h
        minus[i].flat[j] -= h
        fd = (float(value(program(*plus))) - float(value(program(*minus)))) / (2.0 * h)
        gt = float(tape_grads[i].flat[j])
        err = abs(gt - fd) / max(abs(gt), abs(fd), 1e-6)
        worst = max(worst, err)
    return worst
