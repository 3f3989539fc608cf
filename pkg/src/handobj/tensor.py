"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every trainable component in the package is built from the operations in
this module. Design constraints, chosen for verifiability at desk scale:

* 64-bit values everywhere, so central finite differences are a usable
  gradient oracle for every operation.
* A per-thread tape records operations in execution order (which is a
  topological order by construction); ``backward`` consumes the tape.
* Broadcasting is limited to scalars. Structured cases (row vectors,
  channel biases, per-row scales) are dedicated operations with explicit
  adjoints instead.
* ReLU subgradient at 0 is 0; max-pool ties route to the first window
  element in (z, y, x) scan order. Both choices keep tests deterministic.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import ContractViolation, GradientCheckFailure

__all__ = [
    "DiffArray",
    "leaf",
    "constant",
    "as_diff",
    "no_grad",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "sqrt",
    "rsqrt",
    "clip",
    "elementwise",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take_rows",
    "tile_rows",
    "add_rowvec",
    "add_channel_bias",
    "scale_rows",
    "cross_rows",
    "sum_all",
    "sum_last",
    "mean_all",
    "softmax",
    "layer_norm",
    "conv3d",
    "max_pool3d",
    "avg_pool3d",
    "upsample3d",
    "sparse_matmul",
    "AdamState",
    "adam_step",
    "finite_difference_check",
]


class DiffArray:
    """A dense float64 array that can participate in backpropagation."""

    __slots__ = ("values", "requires_grad", "grad", "is_leaf")

    def __init__(self, values, requires_grad=False, is_leaf=True):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = is_leaf

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractViolation(f"expected a scalar, got shape {self.values.shape}")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.values.shape}{flag})"

    # Arithmetic sugar; all dispatch to the module-level operations.
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

    def __neg__(self):
        return neg(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)


def leaf(values, requires_grad=False):
    """Create a leaf array (a parameter or an input)."""
    return DiffArray(np.array(values, dtype=np.float64), requires_grad=requires_grad)


def constant(values):
    return DiffArray(values, requires_grad=False)


def as_diff(x):
    if isinstance(x, DiffArray):
        return x
    return DiffArray(x, requires_grad=False)


# --------------------------------------------------------------------------
# Tape machinery. One tape per thread; independent computations on distinct
# threads never share mutable state.

_tls = threading.local()


def _tape():
    tape = getattr(_tls, "tape", None)
    if tape is None:
        tape = []
        _tls.tape = tape
    return tape


def _enabled():
    return getattr(_tls, "enabled", True)


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        self._prev = _enabled()
        _tls.enabled = False
        return self

    def __exit__(self, *exc):
        _tls.enabled = self._prev
        return False


def _record(out_values, inputs, bwd):
    """Wrap an op result; register the backward closure when tracking."""
    tracked = _enabled() and any(
        isinstance(i, DiffArray) and i.requires_grad for i in inputs
    )
    out = DiffArray(out_values, requires_grad=tracked, is_leaf=False)
    if tracked:
        _tape().append((out, inputs, bwd))
    return out


def backward(root):
    """Propagate d(root)/d(leaf) into the grad of every requires_grad leaf.

    The root must be scalar. Entries recorded on the current thread's tape
    are consumed; gradients accumulate additively into leaf ``grad`` fields,
    so zero them between optimization steps.
    """
    if not isinstance(root, DiffArray) or root.size != 1:
        shape = root.shape if isinstance(root, DiffArray) else type(root)
        raise ContractViolation(f"backward root must be a scalar DiffArray, got {shape}")
    tape = _tape()
    grads = {id(root): [root, np.ones_like(root.values)]}
    while tape:
        out, inputs, bwd = tape.pop()
        slot = grads.pop(id(out), None)
        if slot is None:
            continue
        for inp, g in zip(inputs, bwd(slot[1])):
            if g is None or not isinstance(inp, DiffArray) or not inp.requires_grad:
                continue
            cur = grads.get(id(inp))
            if cur is None:
                grads[id(inp)] = [inp, g]
            else:
                # Never mutate in place: g may alias another node's gradient.
                cur[1] = cur[1] + g
    for node, g in grads.values():
        if node.is_leaf and node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g


def zero_grad(params):
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# Elementwise operations. Binary kinds accept equal shapes or one scalar
# (python number, or a DiffArray of size 1); nothing else broadcasts.


def _scalarness(a, b):
    if a.shape == b.shape:
        return "same"
    if a.size == 1:
        return "a"
    if b.size == 1:
        return "b"
    raise ContractViolation(
        f"shape mismatch: {a.shape} vs {b.shape} (only scalar broadcast is supported)"
    )


def _reduce_to(g, shape):
    """Collapse a full-shape gradient onto a scalar operand's shape."""
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def add(a, b):
    a, b = as_diff(a), as_diff(b)
    kind = _scalarness(a, b)
    out = a.values + b.values

    def bwd(g):
        ga = _reduce_to(g, a.shape) if kind == "a" else g
        gb = _reduce_to(g, b.shape) if kind == "b" else g
        return ga, gb

    return _record(out, (a, b), bwd)


def sub(a, b):
    a, b = as_diff(a), as_diff(b)
    kind = _scalarness(a, b)
    out = a.values - b.values

    def bwd(g):
        ga = _reduce_to(g, a.shape) if kind == "a" else g
        gb = -g
        if kind == "b":
            gb = _reduce_to(gb, b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def mul(a, b):
    a, b = as_diff(a), as_diff(b)
    kind = _scalarness(a, b)
    out = a.values * b.values
    av, bv = a.values, b.values

    def bwd(g):
        ga = g * bv
        gb = g * av
        if kind == "a":
            ga = _reduce_to(ga, a.shape)
        if kind == "b":
            gb = _reduce_to(gb, b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def neg(a):
    a = as_diff(a)
    return _record(-a.values, (a,), lambda g: (-g,))


def relu(a):
    a = as_diff(a)
    mask = a.values > 0

    def bwd(g):
        return (g * mask,)

    return _record(np.where(mask, a.values, 0.0), (a,), bwd)


def _sigmoid_values(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_diff(a)
    s = _sigmoid_values(a.values)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record(s, (a,), bwd)


def log(a):
    a = as_diff(a)
    av = a.values

    def bwd(g):
        return (g / av,)

    return _record(np.log(av), (a,), bwd)


def exp(a):
    a = as_diff(a)
    ev = np.exp(a.values)

    def bwd(g):
        return (g * ev,)

    return _record(ev, (a,), bwd)


def sqrt(a, eps=0.0):
    """Elementwise square root; ``eps`` guards the derivative near zero."""
    a = as_diff(a)
    s = np.sqrt(a.values + eps)

    def bwd(g):
        return (g * (0.5 / s),)

    return _record(s, (a,), bwd)


def rsqrt(a, eps=0.0):
    a = as_diff(a)
    r = 1.0 / np.sqrt(a.values + eps)

    def bwd(g):
        return (g * (-0.5 * r * r * r),)

    return _record(r, (a,), bwd)


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient is zero where clamping engages."""
    a = as_diff(a)
    mask = (a.values > lo) & (a.values < hi)

    def bwd(g):
        return (g * mask,)

    return _record(np.clip(a.values, lo, hi), (a,), bwd)


_UNARY_KINDS = {"neg": neg, "relu": relu, "sigmoid": sigmoid, "log": log, "exp": exp}
_BINARY_KINDS = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind, a, b=None):
    """Dispatch by name; binary kinds require ``b``."""
    if kind in _UNARY_KINDS:
        if b is not None:
            raise ContractViolation(f"{kind} is unary")
        return _UNARY_KINDS[kind](a)
    if kind in _BINARY_KINDS:
        if b is None:
            raise ContractViolation(f"{kind} needs two operands")
        return _BINARY_KINDS[kind](a, b)
    raise ContractViolation(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# Linear algebra and structure.


def matmul(a, b):
    """2-D or batched 3-D matrix product."""
    a, b = as_diff(a), as_diff(b)
    av, bv = a.values, b.values
    if av.ndim == bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ContractViolation(f"matmul inner extents differ: {av.shape} @ {bv.shape}")
    elif av.ndim == bv.ndim == 3:
        if av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
            raise ContractViolation(f"matmul batch shapes differ: {av.shape} @ {bv.shape}")
    else:
        raise ContractViolation(f"matmul expects 2-D or 3-D pairs, got {av.shape} @ {bv.shape}")

    def bwd(g):
        return g @ bv.swapaxes(-1, -2), av.swapaxes(-1, -2) @ g

    return _record(av @ bv, (a, b), bwd)


def transpose(a, axes):
    a = as_diff(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _record(a.values.transpose(axes), (a,), bwd)


def reshape(a, shape):
    a = as_diff(a)
    old = a.values.shape

    def bwd(g):
        return (g.reshape(old),)

    return _record(a.values.reshape(shape), (a,), bwd)


def concat(parts, axis=0):
    parts = [as_diff(p) for p in parts]
    if not parts:
        raise ContractViolation("concat of zero arrays")
    sizes = [p.values.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)].copy())
        return tuple(outs)

    return _record(np.concatenate([p.values for p in parts], axis=axis), tuple(parts), bwd)


def take_rows(a, indices):
    """Select rows by index; duplicate indices accumulate gradient."""
    a = as_diff(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.values.shape

    def bwd(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.values[idx], (a,), bwd)


def tile_rows(v, n):
    """Repeat a vector (F,) into an (n, F) matrix."""
    v = as_diff(v)
    if v.values.ndim != 1:
        raise ContractViolation(f"tile_rows expects a vector, got {v.shape}")

    def bwd(g):
        return (g.sum(axis=0),)

    return _record(np.tile(v.values, (n, 1)), (v,), bwd)


def add_rowvec(x, v):
    """Add a vector (F,) to every row of (N, F)."""
    x, v = as_diff(x), as_diff(v)
    if x.values.shape[-1] != v.values.shape[0] or v.values.ndim != 1:
        raise ContractViolation(f"add_rowvec shape mismatch: {x.shape} + {v.shape}")

    def bwd(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _record(x.values + v.values, (x, v), bwd)


def add_channel_bias(x, b):
    """Add a per-channel bias (C,) to a (C, D, H, W) volume."""
    x, b = as_diff(x), as_diff(b)
    if b.values.ndim != 1 or x.values.shape[0] != b.values.shape[0]:
        raise ContractViolation(f"channel bias mismatch: {x.shape} + {b.shape}")

    def bwd(g):
        return g, g.reshape(g.shape[0], -1).sum(axis=1)

    return _record(x.values + b.values.reshape(-1, *([1] * (x.values.ndim - 1))), (x, b), bwd)


def scale_rows(x, s):
    """Multiply row i of x by s[i]."""
    x, s = as_diff(x), as_diff(s)
    if s.values.ndim != 1 or s.values.shape[0] != x.values.shape[0]:
        raise ContractViolation(f"scale_rows mismatch: {x.shape} * {s.shape}")
    sv = s.values.reshape(-1, *([1] * (x.values.ndim - 1)))
    xv = x.values

    def bwd(g):
        return g * sv, (g * xv).reshape(g.shape[0], -1).sum(axis=1)

    return _record(xv * sv, (x, s), bwd)


def cross_rows(a, b):
    """Row-wise 3-D cross product of (M, 3) arrays."""
    a, b = as_diff(a), as_diff(b)
    av, bv = a.values, b.values
    if av.shape != bv.shape or av.shape[-1] != 3:
        raise ContractViolation(f"cross_rows expects matching (M, 3): {av.shape} x {bv.shape}")

    def bwd(g):
        return np.cross(bv, g), np.cross(g, av)

    return _record(np.cross(av, bv), (a, b), bwd)


def sum_all(a):
    a = as_diff(a)
    shape = a.values.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(a.values.sum()), (a,), bwd)


def mean_all(a):
    a = as_diff(a)
    n = a.values.size
    return mul(sum_all(a), 1.0 / n)


def sum_last(a):
    """Sum over the last axis."""
    a = as_diff(a)
    last = a.values.shape[-1]

    def bwd(g):
        return (np.repeat(g[..., None], last, axis=-1),)

    return _record(a.values.sum(axis=-1), (a,), bwd)


def softmax(x, axis=-1):
    """Numerically stabilized softmax along ``axis``."""
    x = as_diff(x)
    nd = x.values.ndim
    ax = axis + nd if axis < 0 else axis
    if not 0 <= ax < nd:
        raise ContractViolation(f"softmax axis {axis} out of bounds for shape {x.shape}")
    moved = np.moveaxis(x.values, ax, -1)
    shp = moved.shape
    rows = np.ascontiguousarray(moved).reshape(-1, shp[-1])
    p = _kernels.softmax_rows(rows)

    def bwd(g):
        gm = np.ascontiguousarray(np.moveaxis(g, ax, -1)).reshape(-1, shp[-1])
        d = _kernels.softmax_rows_bwd(p, gm)
        return (np.moveaxis(d.reshape(shp), -1, ax),)

    return _record(np.moveaxis(p.reshape(shp), -1, ax), (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_diff(x), as_diff(gain), as_diff(bias)
    feat = x.values.shape[-1]
    if gain.values.shape != (feat,) or bias.values.shape != (feat,):
        raise ContractViolation(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last extent {feat}"
        )
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.values

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _record(xhat * gv + bias.values, (x, gain, bias), bwd)


# --------------------------------------------------------------------------
# Volumetric operations on (C, D, H, W) arrays.


def _conv_patches(xp, k, stride):
    view = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    view = view[:, ::stride, ::stride, ::stride]
    c_in = xp.shape[0]
    do, ho, wo = view.shape[1:4]
    cols = view.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c_in * k**3, do * ho * wo)
    return cols, (do, ho, wo)


def conv3d(x, w, stride=1, padding=0):
    """3-D cross-correlation of (C_in, D, H, W) with (C_out, C_in, k, k, k)."""
    x, w = as_diff(x), as_diff(w)
    xv, wv = x.values, w.values
    if xv.ndim != 4 or wv.ndim != 5:
        raise ContractViolation(f"conv3d expects (C,D,H,W) and (Co,Ci,k,k,k): {xv.shape}, {wv.shape}")
    c_out, c_in, k = wv.shape[0], wv.shape[1], wv.shape[2]
    if wv.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ContractViolation(f"conv3d kernel must be cubic with odd extent, got {wv.shape}")
    if xv.shape[0] != c_in:
        raise ContractViolation(f"conv3d channel mismatch: input {xv.shape} vs kernel {wv.shape}")
    for extent in xv.shape[1:]:
        if (extent + 2 * padding - k) // stride + 1 <= 0:
            raise ContractViolation(
                f"conv3d output extent not positive for input {xv.shape}, k={k}, "
                f"stride={stride}, padding={padding}"
            )
    p = padding
    xp = np.pad(xv, ((0, 0), (p, p), (p, p), (p, p))) if p else xv
    cols, (do, ho, wo) = _conv_patches(xp, k, stride)
    w2 = wv.reshape(c_out, -1)
    out = (w2 @ cols).reshape(c_out, do, ho, wo)
    in_shape = xv.shape

    def bwd(g):
        g2 = g.reshape(c_out, -1)
        # Patches are recomputed instead of retained: the saved padded input
        # is far smaller than the unfolded matrix.
        cols_b, _ = _conv_patches(xp, k, stride)
        dw = (g2 @ cols_b.T).reshape(wv.shape)
        colg = (w2.T @ g2).reshape(c_in, k, k, k, do, ho, wo)
        dxp = np.zeros_like(xp)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    dxp[:, a : a + stride * do : stride,
                        b : b + stride * ho : stride,
                        c : c + stride * wo : stride] += colg[:, a, b, c]
        if p:
            dx = dxp[:, p : p + in_shape[1], p : p + in_shape[2], p : p + in_shape[3]].copy()
        else:
            dx = dxp
        return dx, dw

    return _record(out, (x, w), bwd)


def _pool_check(shape, window):
    if any(extent % window for extent in shape[1:]):
        raise ContractViolation(f"pool window {window} does not divide extents {shape[1:]}")


def max_pool3d(x, window, stride=None):
    """Non-overlapping max pooling; ties go to the first cell in scan order."""
    x = as_diff(x)
    if stride is not None and stride != window:
        raise ContractViolation("max_pool3d supports stride equal to window only")
    xv = x.values
    _pool_check(xv.shape, window)
    c, d, h, w = xv.shape
    do, ho, wo = d // window, h // window, w // window
    cube = window**3
    r = (
        xv.reshape(c, do, window, ho, window, wo, window)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, do, ho, wo, cube)
    )
    am = r.argmax(axis=-1)
    out = np.take_along_axis(r, am[..., None], axis=-1)[..., 0]

    def bwd(g):
        dr = np.zeros((c, do, ho, wo, cube))
        np.put_along_axis(dr, am[..., None], g[..., None], axis=-1)
        return (
            dr.reshape(c, do, ho, wo, window, window, window)
            .transpose(0, 1, 4, 2, 5, 3, 6)
            .reshape(c, d, h, w),
        )

    return _record(out, (x,), bwd)


def avg_pool3d(x, window):
    x = as_diff(x)
    xv = x.values
    _pool_check(xv.shape, window)
    c, d, h, w = xv.shape
    do, ho, wo = d // window, h // window, w // window
    r = xv.reshape(c, do, window, ho, window, wo, window)
    out = r.mean(axis=(2, 4, 6))
    inv = 1.0 / window**3

    def bwd(g):
        expanded = np.broadcast_to(
            g[:, :, None, :, None, :, None] * inv, (c, do, window, ho, window, wo, window)
        )
        return (expanded.reshape(c, d, h, w).copy(),)

    return _record(out, (x,), bwd)


def upsample3d(x, factor=2):
    """Nearest-neighbor upsampling; the adjoint is window summation."""
    x = as_diff(x)
    xv = x.values
    c, d, h, w = xv.shape
    f = factor
    out = np.repeat(np.repeat(np.repeat(xv, f, axis=1), f, axis=2), f, axis=3)

    def bwd(g):
        return (g.reshape(c, d, f, h, f, w, f).sum(axis=(2, 4, 6)),)

    return _record(out, (x,), bwd)


def sparse_matmul(sp, x, sp_t=None):
    """Product of a constant scipy sparse matrix with a dense (N, F) array."""
    x = as_diff(x)
    if sp.shape[1] != x.values.shape[0]:
        raise ContractViolation(f"sparse_matmul mismatch: {sp.shape} @ {x.shape}")
    st = sp_t if sp_t is not None else sp.T.tocsr()

    def bwd(g):
        return (st @ g,)

    return _record(sp @ x.values, (x,), bwd)


# --------------------------------------------------------------------------
# Optimizer.


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one parameter list."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state, params, grads=None):
    """One Adam update with bias correction, applied in place."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ContractViolation("adam_step: params/grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p.values) for p in params]
        state.v = [np.zeros_like(p.values) for p in params]
    state.step += 1
    t = state.step
    lr_t = state.learning_rate * np.sqrt(1.0 - state.beta2**t) / (1.0 - state.beta1**t)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            raise ContractViolation("adam_step: gradient not populated")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.values.shape:
            raise ContractViolation(f"adam_step shape mismatch: {g.shape} vs {p.values.shape}")
        _kernels.adam_update(p.values, g, m, v, lr_t, state.beta1, state.beta2, state.epsilon)
    return params


# --------------------------------------------------------------------------
# Finite-difference oracle.


def finite_difference_check(f, points, epsilon=1e-6, max_coords=None, rng=None):
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``points`` are the leaves to probe; ``f`` must rebuild its computation
    from their current values on every call. Returns the maximum over probed
    coordinates of |analytic - numeric| / max(1, |numeric|). When
    ``max_coords`` is given, at most that many coordinates per array are
    probed (chosen with ``rng``).
    """
    points = list(points)
    for p in points:
        p.requires_grad = True
    zero_grad(points)
    y = f()
    if not isinstance(y, DiffArray) or y.size != 1:
        raise ContractViolation("finite_difference_check expects a scalar-valued function")
    backward(y)
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in points]
    zero_grad(points)

    worst = 0.0
    if rng is None:
        rng = np.random.default_rng(0)
    with no_grad():
        for ai, p in enumerate(points):
            flat = p.values.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords:
                coords = rng.choice(n, size=max_coords, replace=False)
            else:
                coords = range(n)
            for ci in coords:
                orig = flat[ci]
                flat[ci] = orig + epsilon
                up = f().item()
                flat[ci] = orig - epsilon
                dn = f().item()
                flat[ci] = orig
                if not (np.isfinite(up) and np.isfinite(dn)):
                    raise GradientCheckFailure(
                        f"non-finite evaluation at array {ai}, coordinate {ci}",
                        coordinate=(ai, int(ci)),
                    )
                numeric = (up - dn) / (2.0 * epsilon)
                err = abs(analytic[ai].reshape(-1)[ci] - numeric) / max(1.0, abs(numeric))
                if err > worst:
                    worst = err
    return worst
