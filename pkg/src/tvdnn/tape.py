"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records array operations as they execute; ``backward`` walks
the record in reverse and accumulates vector-Jacobian products.  Tracked
values are plain float64 arrays wrapped in :class:`Var` handles, and every
operation here also accepts raw arrays, so the same numerical code runs taped
(for training) or untaped (for evaluation) depending on whether its inputs
are tracked.

Non-smooth primitives use one-sided subgradients with fixed tie rules:

* ``maximum(a, b)`` / ``minimum(a, b)`` send the gradient to the first
  argument on ties,
* ``absolute`` has gradient 0 at 0,
* ``where`` differentiates only the selected branch.

The boolean masks behind those decisions are kept on the tape, so
``branch_signature`` can fingerprint which branches a computation took; the
finite-difference checker uses this to tell genuine gradient errors apart
from kink crossings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


class TapeError(RuntimeError):
    """Misuse of the tape (mixed tapes, bad seed shape, ...)."""


class GradientError(RuntimeError):
    """Non-finite value encountered while differentiating."""

    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"{message} (node {node})")
        self.node = node


def _asarray(x):
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Append-only record of differentiable array operations."""

    __slots__ = ("_backs", "_masks")

    def __init__(self):
        self._backs = []
        self._masks = []

    @property
    def n_nodes(self):
        return len(self._backs)

    def _emit(self, value, back):
        self._backs.append(back)
        return Var(self, len(self._backs) - 1, value)

    def leaf(self, value):
        """Track ``value`` as a differentiable input."""
        return self._emit(_asarray(value), None)

    def branch_signature(self):
        """Hash of every branch decision (max/min/where/abs) in record order."""
        h = hashlib.blake2b(digest_size=16)
        for idx, mask in self._masks:
            h.update(idx.to_bytes(8, "little"))
            h.update(mask.tobytes())
        return h.digest()

    def backward(self, out, wrt, seed=None, check_finite=False, stats=None):
        """Accumulate d(out)/d(w) for every Var ``w`` in ``wrt``.

        ``seed`` is the cotangent of ``out`` (defaults to ones, i.e. the
        gradient of a scalar).  Returns one array per entry of ``wrt``;
        untouched leaves get zeros.  With ``check_finite`` every intermediate
        cotangent is validated and a :class:`GradientError` pinpoints the
        first offending node.  ``stats``, if a dict, receives node count and
        the largest accumulated partial.
        """
        if out.tape is not self:
            raise TapeError("output was recorded on a different tape")
        if seed is None:
            seed = np.ones_like(out.value)
        else:
            seed = _asarray(seed)
            if seed.shape != out.value.shape:
                raise TapeError(
                    f"seed shape {seed.shape} does not match output {out.value.shape}"
                )
        if not np.all(np.isfinite(out.value)):
            raise GradientError("non-finite forward value at backward() entry")

        n = out.idx + 1
        grads: list = [None] * n
        owned = bytearray(n)
        grads[out.idx] = seed
        keep = {w.idx for w in wrt}

        def acc(i, v):
            cur = grads[i]
            if cur is None:
                grads[i] = v
            elif owned[i] and isinstance(cur, np.ndarray):
                # in-place is safe: this buffer was freshly allocated below
                cur += v
            else:
                # never mutate: cur may alias another node's cotangent, or be
                # an immutable numpy scalar (0-d results degrade to those)
                grads[i] = cur + v
                owned[i] = 1

        backs = self._backs
        max_partial = 0.0
        for i in range(out.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            if check_finite and not np.all(np.isfinite(g)):
                raise GradientError("non-finite gradient", node=i)
            if stats is not None:
                m = float(np.max(np.abs(g))) if g.size else 0.0
                if m > max_partial:
                    max_partial = m
            b = backs[i]
            if b is not None:
                b(g, acc)
                if i not in keep:
                    grads[i] = None  # free memory for interior nodes

        if stats is not None:
            stats["n_nodes"] = self.n_nodes
            stats["max_partial"] = max_partial

        result = []
        for w in wrt:
            if w.tape is not self:
                raise TapeError("wrt Var was recorded on a different tape")
            g = grads[w.idx] if w.idx < n else None
            result.append(np.zeros_like(w.value) if g is None else g)
        return result


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(idx={self.idx}, value={self.value!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __getitem__(self, key):
        return take(self, key)


def val(x):
    """Raw numpy value of ``x`` whether tracked or not."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _ub(g, shape):
    """Reduce a cotangent back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    t = _tape_of(a, b)
    av, bv = val(a), val(b)
    if t is None:
        return av + bv
    out = av + bv
    ia = a.idx if isinstance(a, Var) else -1
    ib = b.idx if isinstance(b, Var) else -1
    sa = np.shape(av)
    sb = np.shape(bv)

    def back(g, acc):
        if ia >= 0:
            acc(ia, _ub(g, sa))
        if ib >= 0:
            acc(ib, _ub(g, sb))

    return t._emit(out, back)


def subtract(a, b):
    t = _tape_of(a, b)
    av, bv = val(a), val(b)
    if t is None:
        return av - bv
    out = av - bv
    ia = a.idx if isinstance(a, Var) else -1
    ib = b.idx if isinstance(b, Var) else -1
    sa = np.shape(av)
    sb = np.shape(bv)

    def back(g, acc):
        if ia >= 0:
            acc(ia, _ub(g, sa))
        if ib >= 0:
            acc(ib, _ub(-g, sb))

    return t._emit(out, back)


def multiply(a, b):
    t = _tape_of(a, b)
    av, bv = val(a), val(b)
    if t is None:
        return av * bv
    out = av * bv
    ia = a.idx if isinstance(a, Var) else -1
    ib = b.idx if isinstance(b, Var) else -1
    sa = np.shape(av)
    sb = np.shape(bv)

    def back(g, acc):
        if ia >= 0:
            acc(ia, _ub(g * bv, sa))
        if ib >= 0:
            acc(ib, _ub(g * av, sb))

    return t._emit(out, back)


def divide(a, b):
    t = _tape_of(a, b)
    av, bv = val(a), val(b)
    if t is None:
        return av / bv
    out = av / bv
    ia = a.idx if isinstance(a, Var) else -1
    ib = b.idx if isinstance(b, Var) else -1
    sa = np.shape(av)
    sb = np.shape(bv)

    def back(g, acc):
        if ia >= 0:
            acc(ia, _ub(g / bv, sa))
        if ib >= 0:
            acc(ib, _ub(-g * out / bv, sb))

    return t._emit(out, back)


def negative(a):
    if not isinstance(a, Var):
        return -a
    ia = a.idx

    def back(g, acc):
        acc(ia, -g)

    return a.tape._emit(-a.value, back)


def tanh(a):
    if not isinstance(a, Var):
        return np.tanh(a)
    out = np.tanh(a.value)
    ia = a.idx

    def back(g, acc):
        acc(ia, g * (1.0 - out * out))

    return a.tape._emit(out, back)


def absolute(a):
    """|a| with subgradient 0 at 0."""
    if not isinstance(a, Var):
        return np.abs(a)
    s = np.sign(a.value)
    ia = a.idx
    t = a.tape
    out = t._emit(np.abs(a.value), lambda g, acc: acc(ia, g * s))
    t._masks.append((out.idx, s >= 0))
    return out


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to the first argument."""
    t = _tape_of(a, b)
    av, bv = val(a), val(b)
    if t is None:
        return np.maximum(av, bv)
    mask = av >= bv
    out = np.where(mask, av, bv)
    ia = a.idx if isinstance(a, Var) else -1
    ib = b.idx if isinstance(b, Var) else -1
    sa = np.shape(av)
    sb = np.shape(bv)

    def back(g, acc):
        if ia >= 0:
            acc(ia, _ub(g * mask, sa))
        if ib >= 0:
            acc(ib, _ub(g * ~mask, sb))

    v = t._emit(out, back)
    t._masks.append((v.idx, mask))
    return v


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to the first argument."""
    t = _tape_of(a, b)
    av, bv = val(a), val(b)
    if t is None:
        return np.minimum(av, bv)
    mask = av <= bv
    out = np.where(mask, av, bv)
    ia = a.idx if isinstance(a, Var) else -1
    ib = b.idx if isinstance(b, Var) else -1
    sa = np.shape(av)
    sb = np.shape(bv)

    def back(g, acc):
        if ia >= 0:
            acc(ia, _ub(g * mask, sa))
        if ib >= 0:
            acc(ib, _ub(g * ~mask, sb))

    v = t._emit(out, back)
    t._masks.append((v.idx, mask))
    return v


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; cond is never differentiated."""
    cond = np.asarray(cond, bool)
    t = _tape_of(a, b)
    av, bv = val(a), val(b)
    if t is None:
        return np.where(cond, av, bv)
    out = np.where(cond, av, bv)
    ia = a.idx if isinstance(a, Var) else -1
    ib = b.idx if isinstance(b, Var) else -1
    sa = np.shape(av)
    sb = np.shape(bv)

    def back(g, acc):
        if ia >= 0:
            acc(ia, _ub(g * cond, sa))
        if ib >= 0:
            acc(ib, _ub(g * ~cond, sb))

    v = t._emit(out, back)
    t._masks.append((v.idx, cond))
    return v


def matmul(a, b):
    """2-D matrix product a @ b."""
    t = _tape_of(a, b)
    av, bv = val(a), val(b)
    if t is None:
        return av @ bv
    out = av @ bv
    ia = a.idx if isinstance(a, Var) else -1
    ib = b.idx if isinstance(b, Var) else -1

    def back(g, acc):
        if ia >= 0:
            acc(ia, g @ bv.T)
        if ib >= 0:
            acc(ib, av.T @ g)

    return t._emit(out, back)


def dense_tanh(w, x, b):
    """Fused layer tanh(w @ x + b) with b a column vector."""
    t = _tape_of(w, x, b)
    wv, xv, bv = val(w), val(x), val(b)
    if t is None:
        return np.tanh(wv @ xv + bv)
    z = np.tanh(wv @ xv + bv)
    iw = w.idx if isinstance(w, Var) else -1
    ix = x.idx if isinstance(x, Var) else -1
    ib = b.idx if isinstance(b, Var) else -1

    def back(g, acc):
        u = g * (1.0 - z * z)
        if iw >= 0:
            acc(iw, u @ xv.T)
        if ix >= 0:
            acc(ix, wv.T @ u)
        if ib >= 0:
            acc(ib, u.sum(axis=1, keepdims=True))

    return t._emit(z, back)


def dense_linear(w, x, b):
    """Fused layer w @ x + b with b a column vector."""
    t = _tape_of(w, x, b)
    wv, xv, bv = val(w), val(x), val(b)
    if t is None:
        return wv @ xv + bv
    out = wv @ xv + bv
    iw = w.idx if isinstance(w, Var) else -1
    ix = x.idx if isinstance(x, Var) else -1
    ib = b.idx if isinstance(b, Var) else -1

    def back(g, acc):
        if iw >= 0:
            acc(iw, g @ xv.T)
        if ix >= 0:
            acc(ix, wv.T @ g)
        if ib >= 0:
            acc(ib, g.sum(axis=1, keepdims=True))

    return t._emit(out, back)


def one_minus_square(a):
    """1 - a*a as one node (the tanh-derivative factor)."""
    if not isinstance(a, Var):
        return 1.0 - a * a
    av = a.value
    ia = a.idx

    def back(g, acc):
        acc(ia, (-2.0 * g) * av)

    return a.tape._emit(1.0 - av * av, back)


def reshape(a, shape):
    """View-compatible reshape; gradient reshapes back."""
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    ia = a.idx
    orig = a.value.shape

    def back(g, acc):
        acc(ia, np.reshape(g, orig))

    return a.tape._emit(np.reshape(a.value, shape), back)


def take(a, key):
    """Basic slicing/indexing; gradient scatters back into zeros."""
    if not isinstance(a, Var):
        return a[key]
    ia = a.idx
    shape = a.value.shape

    def back(g, acc):
        gp = np.zeros(shape)
        gp[key] = g
        acc(ia, gp)

    return a.tape._emit(a.value[key], back)


def roll(a, shift, axis):
    if not isinstance(a, Var):
        return np.roll(a, shift, axis=axis)
    ia = a.idx

    def back(g, acc):
        acc(ia, np.roll(g, -shift, axis=axis))

    return a.tape._emit(np.roll(a.value, shift, axis=axis), back)


def concat(parts, axis):
    t = _tape_of(*parts)
    vals = [val(p) for p in parts]
    if t is None:
        return np.concatenate(vals, axis=axis)
    out = np.concatenate(vals, axis=axis)
    idxs = [p.idx if isinstance(p, Var) else -1 for p in parts]
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    ndim = out.ndim

    def back(g, acc):
        for k, i in enumerate(idxs):
            if i >= 0:
                sl = [slice(None)] * ndim
                sl[axis] = slice(offsets[k], offsets[k + 1])
                acc(i, g[tuple(sl)])

    return t._emit(out, back)


def total(a):
    """Sum of all elements (0-d result)."""
    if not isinstance(a, Var):
        return np.asarray(np.sum(a))
    ia = a.idx
    shape = a.value.shape

    def back(g, acc):
        acc(ia, np.broadcast_to(g, shape))

    return a.tape._emit(np.asarray(np.sum(a.value)), back)


def sum_axis(a, axis, keepdims=False):
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    ia = a.idx
    shape = a.value.shape

    def back(g, acc):
        gg = g if keepdims else np.expand_dims(g, axis)
        acc(ia, np.broadcast_to(gg, shape))

    return a.tape._emit(np.sum(a.value, axis=axis, keepdims=keepdims), back)


# ---------------------------------------------------------------------------
# finite-difference validation
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_err: float
    max_rel_err_smooth: float
    indices: np.ndarray
    rel_err: np.ndarray
    nonsmooth: np.ndarray
    checked: int = 0

    @property
    def flagged(self):
        return self.indices[self.nonsmooth]


def grad_check(loss_fn, grad_fn, theta, h=1e-5, n_sample=50, rng=None,
               signature_fn=None, abs_floor=1e-8):
    """Compare an analytic gradient against central finite differences.

    ``loss_fn(theta) -> float`` and ``grad_fn(theta) -> flat array`` evaluate
    the same scalar map; a random subsample of at least ``n_sample``
    components of ``theta`` is probed with step ``h``.  Relative errors are
    measured only where the analytic gradient exceeds ``abs_floor``.  When
    ``signature_fn(theta) -> bytes`` is given, components whose perturbation
    flips any branch decision are flagged non-smooth and excluded from
    ``max_rel_err_smooth``.
    """
    theta = _asarray(theta).ravel()
    rng = np.random.default_rng(0) if rng is None else rng
    n = theta.size
    k = min(n, max(int(n_sample), 1))
    idx = np.sort(rng.choice(n, size=k, replace=False))

    analytic = _asarray(grad_fn(theta)).ravel()
    if analytic.size != n:
        raise ValueError("grad_fn returned a gradient of the wrong size")

    base_sig = signature_fn(theta) if signature_fn is not None else None
    rel = np.zeros(k)
    nonsmooth = np.zeros(k, dtype=bool)
    for j, i in enumerate(idx):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        fp = loss_fn(tp)
        fm = loss_fn(tm)
        fd = (fp - fm) / (2.0 * h)
        if base_sig is not None:
            nonsmooth[j] = (signature_fn(tp) != base_sig) or (signature_fn(tm) != base_sig)
        a = analytic[i]
        if abs(a) > abs_floor:
            rel[j] = abs(fd - a) / abs(a)
        elif abs(fd) > abs_floor:
            rel[j] = abs(fd - a) / abs(fd)

    smooth = rel[~nonsmooth]
    return GradCheckReport(
        max_rel_err=float(rel.max()) if k else 0.0,
        max_rel_err_smooth=float(smooth.max()) if smooth.size else 0.0,
        indices=idx,
        rel_err=rel,
        nonsmooth=nonsmooth,
        checked=k,
    )
