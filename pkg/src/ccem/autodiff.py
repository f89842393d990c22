"""Reverse-mode automatic differentiation on float64 numpy arrays.

A Tape is an append-only list of nodes in topological order; ops record onto
the currently active tape (entered via `with Tape():`) whenever an input
requires grad. backward(root, tape) walks the tape in reverse from the root
and returns a gradient map keyed by tensor identity.

Subgradient conventions at kinks (fixed once, deterministic):
  relu'(0) = 0, max ties resolve to the first index, clamp keeps the
  limit-from-below branch (lower bound exclusive, upper bound inclusive).

Finite-value policy: every op can assert finiteness of its output. Full
checking on large arrays is costly inside unrolled solves, so the default
("auto") checks arrays up to 4096 elements and leaves large intermediates to
the solver's per-step energy/gradient checks. CCEM_CHECK_FINITE=full|auto|off
overrides.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_CHECK_MODE = os.environ.get("CCEM_CHECK_FINITE", "auto")
_CHECK_LIMIT = 4096

_ACTIVE_TAPE = None


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr, opname):
    if _CHECK_MODE == "off":
        return
    if _CHECK_MODE == "auto" and arr.size > _CHECK_LIMIT:
        return
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite output of op '{opname}'")


@contextlib.contextmanager
def finite_checks_disabled():
    """Turn op-output finiteness checks off for a block.

    Solvers use this so a diverging trajectory surfaces as a flagged failure
    of that one start instead of an exception killing the whole batch.
    """
    global _CHECK_MODE
    saved = _CHECK_MODE
    _CHECK_MODE = "off"
    try:
        yield
    finally:
        _CHECK_MODE = saved


class Tensor:
    """Dense float64 tensor, optionally attached to a tape node."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the module-level functions do the real work
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Node:
    __slots__ = ("inputs", "vjp", "out", "idx")

    def __init__(self, inputs, vjp, out, idx):
        self.inputs = inputs
        self.vjp = vjp
        self.out = out
        self.idx = idx


class Tape:
    """Single-owner op recorder. Reusable only after an explicit reset()."""

    def __init__(self):
        self.nodes = []
        self._spent = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        if self._spent:
            raise RuntimeError("tape already used for backward; call reset() first")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def reset(self):
        self.nodes.clear()
        self._spent = False


def active_tape():
    return _ACTIVE_TAPE


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(opname, out_data, inputs, vjp):
    """Wrap an op result; appends a node when a tape is active and any input
    carries gradient information."""
    _check_finite(out_data, opname)
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(tuple(inputs), vjp, out, len(tape.nodes))
        out.node = node
        tape.nodes.append(node)
    return out


def custom_op(opname, out_data, inputs, vjp):
    """Public hook for composite ops (projections etc.) with hand-written VJPs."""
    return _record(opname, out_data, tuple(as_tensor(t) for t in inputs), vjp)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", out, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", out, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record("mul", out, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record("div", out, (a, b), vjp)


def neg(a):
    a = as_tensor(a)

    def vjp(g):
        return (-g,)

    return _record("neg", -a.data, (a,), vjp)


def matmul(a, b):
    """2-D @ 2-D, 2-D @ 1-D, or 1-D @ 2-D (what the PICNN needs)."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        raise ValueError("matmul supports at most 2-D operands")

    return _record("matmul", out, (a, b), vjp)


def texp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record("exp", out, (a,), vjp)


def tlog(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _record("log", out, (a,), vjp)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        # guard the kink at 0; a.e. correct and keeps unrolled Adam finite
        return (g * 0.5 / np.maximum(out, 1e-150),)

    return _record("sqrt", out, (a,), vjp)


def square(a):
    a = as_tensor(a)

    def vjp(g):
        return (g * 2.0 * a.data,)

    return _record("square", a.data * a.data, (a,), vjp)


def softplus(a):
    a = as_tensor(a)
    out = kernels.softplus(a.data)
    sg = None

    def vjp(g):
        nonlocal sg
        if sg is None:
            sg = kernels.sigmoid(a.data)
        return (g * sg,)

    return _record("softplus", out, (a,), vjp)


def sigmoid(a):
    a = as_tensor(a)
    out = kernels.sigmoid(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (a,), vjp)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _record("relu", out, (a,), vjp)


def step(a):
    """Heaviside with the relu'(0)=0 convention; gradient is zero a.e."""
    a = as_tensor(a)
    out = (a.data > 0.0).astype(np.float64)

    def vjp(g):
        return (np.zeros_like(a.data),)

    return _record("step", out, (a,), vjp)


def clamp(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    # limit-from-below: lower kink closed from above, upper kink included
    mask = (a.data > lo) & (a.data <= hi)

    def vjp(g):
        return (g * mask,)

    return _record("clamp", out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def vjp(g):
        g = np.asarray(g) / n
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("mean", out, (a,), vjp)


def tmax(a, axis=None):
    """Max reduction; ties send the gradient to the first index."""
    a = as_tensor(a)
    out = a.data.max(axis=axis)

    def vjp(g):
        g = np.asarray(g)
        grad = np.zeros_like(a.data)
        if axis is None:
            i = np.unravel_index(np.argmax(a.data), a.data.shape)
            grad[i] = g
        else:
            idx = np.argmax(a.data, axis=axis)
            gi = np.expand_dims(g, axis)
            np.put_along_axis(grad, np.expand_dims(idx, axis), gi, axis=axis)
        return (grad,)

    return _record("max", out, (a,), vjp)


def norm2(a):
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data))

    def vjp(g):
        denom = max(out, 1e-150)
        return (np.asarray(g) * a.data / denom,)

    return _record("norm2", out, (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _record("reshape", a.data.reshape(shape), (a,), vjp)


def transpose(a):
    a = as_tensor(a)

    def vjp(g):
        return (g.T.copy(),)

    return _record("transpose", a.data.T.copy(), (a,), vjp)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def vjp(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _record("concat", out, ts, vjp)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis; adjoint pads with zeros."""
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g):
        grad = np.zeros_like(a.data)
        grad[sl] = g
        return (grad,)

    return _record("narrow", a.data[sl].copy(), (a,), vjp)


def take(a, indices, axis=0):
    """Index-select along an axis; adjoint scatter-adds (duplicates sum)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, (slice(None),) * axis + (idx,), g)
        return (grad,)

    return _record("take", out, (a,), vjp)


def tile_rows(a, reps):
    """(K, ...) -> (reps*K, ...) by repetition; adjoint sums over the tiles."""
    a = as_tensor(a)
    k = a.data.shape[0]
    out = np.tile(a.data, (reps,) + (1,) * (a.data.ndim - 1))

    def vjp(g):
        return (g.reshape((reps, k) + a.data.shape[1:]).sum(axis=0),)

    return _record("tile_rows", out, (a,), vjp)


def gather_scopes(y, idx, mask):
    """Padded scope gather: y is (B, d), idx/mask are (K, dmax) with padded
    slots masked out; returns (B*K, dmax) factor input rows."""
    y = as_tensor(y)
    bsz = y.data.shape[0]
    kk, dmax = idx.shape
    out = (y.data[:, idx] * mask[None, :, :]).reshape(bsz * kk, dmax)

    def vjp(g):
        grad = np.zeros_like(y.data)
        kernels.scatter_add_rows(grad, idx, mask, g)
        return (grad,)

    return _record("gather_scopes", out, (y,), vjp)


def scatter_rows(g_rows, idx, mask, out_dim):
    """Weighted scatter-add of factor-row values back to the flat decision
    vector: rows (B*K, dmax) -> (B, out_dim). Linear; adjoint is the gather."""
    g_rows = as_tensor(g_rows)
    kk, dmax = idx.shape
    bsz = g_rows.data.shape[0] // kk
    out = np.zeros((bsz, out_dim))
    kernels.scatter_add_rows(out, idx, mask, g_rows.data)

    def vjp(g):
        return ((g[:, idx] * mask[None, :, :]).reshape(bsz * kk, dmax),)

    return _record("scatter_rows", out, (g_rows,), vjp)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

class GradMap:
    def __init__(self, grads):
        self._grads = grads

    def __getitem__(self, t):
        return self._grads[id(t)]

    def get(self, t, default=None):
        return self._grads.get(id(t), default)

    def __contains__(self, t):
        return id(t) in self._grads


def backward(root, tape):
    """Reverse sweep from a scalar root over the given tape.

    Returns a GradMap holding gradients for every reachable tensor that
    requires grad. The tape is marked spent; reset() before reuse.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward root must be a Tensor")
    if root.data.size != 1:
        raise ValueError("backward root must be scalar")
    if root.node is None:
        raise ValueError("root is detached (no tape node); nothing to differentiate")
    if tape._spent:
        raise RuntimeError("tape already used for backward; call reset() first")
    tape._spent = True

    grads = {id(root): np.ones_like(root.data)}
    keep = {}
    for node in reversed(tape.nodes[: root.node.idx + 1]):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        input_grads = node.vjp(g_out)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi)
            if gi.shape != t.data.shape:
                raise ValueError(
                    f"vjp shape mismatch: {gi.shape} vs {t.data.shape}"
                )
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
            if t.node is None:
                keep[tid] = grads[tid]
    keep.update(grads)
    return GradMap(keep)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

@dataclass
class FDReport:
    max_rel_error: float
    kink_indices: list = field(default_factory=list)
    errors: np.ndarray | None = None


def finite_difference_check(f, x, h=1e-5, kink_tol=0.05):
    """Compare the taped gradient of a scalar function against central
    differences.

    Returns an FDReport with the max relative error
    |analytic - central| / (|analytic| + 1e-12) over coordinates, and flags
    coordinates where forward/backward one-sided differences disagree (a kink
    was encountered, so the central difference is not trustworthy there).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    x = np.asarray(x, dtype=np.float64)
    xt = Tensor(x, requires_grad=True)
    tape = Tape()
    with tape:
        out = f(xt)
    analytic = backward(out, tape).get(xt)
    if analytic is None:
        analytic = np.zeros_like(x)

    f0 = float(f(Tensor(x)).data)
    if not np.isfinite(f0):
        raise NonFiniteError("f is non-finite at x")
    flat = x.ravel()
    errors = np.zeros(flat.size)
    kinks = []
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(Tensor(xp.reshape(x.shape))).data)
        fm = float(f(Tensor(xm.reshape(x.shape))).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("f is non-finite near x")
        central = (fp - fm) / (2.0 * h)
        fwd = (fp - f0) / h
        bwd = (f0 - fm) / h
        scale = max(abs(fwd), abs(bwd), 1e-8)
        if abs(fwd - bwd) / scale > kink_tol and abs(fwd - bwd) > 10.0 * h:
            kinks.append(i)
        a = analytic.ravel()[i]
        errors[i] = abs(a - central) / (abs(a) + 1e-12)
    return FDReport(float(errors.max()), kinks, errors)
