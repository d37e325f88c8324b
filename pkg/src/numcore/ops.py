"""Dense float64 primitives.

Every primitive accepts plain arrays or tape ``Var`` values. With plain
arrays it returns an ``np.ndarray``; if any operand is a ``Var`` the result is
recorded on that operand's tape together with its backward rule.

The differentiable set is: add/sub/mul/div, relu, exp, log, matmul,
3x3 stride-1 zero-padded convolution, softmax and log-softmax, row
l2-normalisation, align-corners bilinear resize, sum/mean, row gather, and
the structural reshape/transpose/concat.
"""
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ArgumentError
from .tape import Operand, Var, tape_of, value_of

Axis = Union[int, Tuple[int, ...], None]


def _check_axis(x: np.ndarray, axis: int) -> int:
    ndim = x.ndim
    if not -ndim <= axis < ndim:
        raise ArgumentError(f'axis {axis} out of range for tensor of rank {ndim}')
    return axis % ndim


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _record(out: np.ndarray, parents: Sequence[Operand], backward, op: str):
    tape = tape_of(*parents)
    if tape is None:
        return out
    return tape.record(out, parents, backward, op)


# ---------------------------------------------------------------- elementwise

def add(a: Operand, b: Operand):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)), 'add')


def sub(a: Operand, b: Operand):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)), 'sub')


def mul(a: Operand, b: Operand):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _record(out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), 'mul')


def div(a: Operand, b: Operand):
    av, bv = value_of(a), value_of(b)
    out = av / bv

    def backward(g):
        return (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape))

    return _record(out, (a, b), backward, 'div')


def relu(x: Operand):
    xv = value_of(x)
    out = np.maximum(xv, 0.0)
    return _record(out, (x,), lambda g: (g * (xv > 0.0),), 'relu')


def exp(x: Operand):
    out = np.exp(value_of(x))
    return _record(out, (x,), lambda g: (g * out,), 'exp')


def log(x: Operand):
    xv = value_of(x)
    out = np.log(xv)
    return _record(out, (x,), lambda g: (g / xv,), 'log')


# ------------------------------------------------------------------- linear

def matmul(a: Operand, b: Operand):
    av, bv = value_of(a), value_of(b)
    out = av @ bv

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
        gb = np.swapaxes(av, -1, -2) @ g if av.ndim > 1 else np.multiply.outer(av, g)
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return _record(out, (a, b), backward, 'matmul')


def _im2col(xv: np.ndarray) -> np.ndarray:
    c, h, w = xv.shape
    xp = np.pad(xv, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, h, w))
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xp[:, ky:ky + h, kx:kx + w]
    return cols.reshape(c * 9, h * w)


def conv3x3(x: Operand, weight: Operand, bias: Operand):
    """Stride-1, zero-padded 3x3 convolution of a [C_in, H, W] map."""
    xv, wv, bv = value_of(x), value_of(weight), value_of(bias)
    if xv.ndim != 3 or wv.ndim != 4 or wv.shape[2:] != (3, 3) or wv.shape[1] != xv.shape[0]:
        raise ArgumentError(f'conv3x3 shape mismatch: input {xv.shape}, weight {wv.shape}')
    c_in, h, w = xv.shape
    c_out = wv.shape[0]
    cols = _im2col(xv)
    wmat = wv.reshape(c_out, c_in * 9)
    out = (wmat @ cols + bv[:, None]).reshape(c_out, h, w)

    def backward(g):
        g2 = g.reshape(c_out, h * w)
        gw = (g2 @ cols.T).reshape(wv.shape)
        gb = g2.sum(axis=1)
        dcols = (wmat.T @ g2).reshape(c_in, 3, 3, h, w)
        dxp = np.zeros((c_in, h + 2, w + 2))
        for ky in range(3):
            for kx in range(3):
                dxp[:, ky:ky + h, kx:kx + w] += dcols[:, ky, kx]
        return (dxp[:, 1:-1, 1:-1], gw, gb)

    return _record(out, (x, weight, bias), backward, 'conv3x3')


# --------------------------------------------------------------- reductions

def sum(x: Operand, axis: Axis = None, keepdims: bool = False):  # noqa: A001
    xv = value_of(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _record(np.asarray(out, dtype=np.float64), (x,), backward, 'sum')


def mean(x: Operand, axis: Axis = None, keepdims: bool = False):
    xv = value_of(x)
    if axis is None:
        count = xv.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([xv.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# --------------------------------------------------------------- structural

def reshape(x: Operand, shape: Tuple[int, ...]):
    xv = value_of(x)
    out = xv.reshape(shape)
    return _record(out, (x,), lambda g: (g.reshape(xv.shape),), 'reshape')


def transpose(x: Operand, axes: Optional[Tuple[int, ...]] = None):
    xv = value_of(x)
    out = np.transpose(xv, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inverse),), 'transpose')


def take(x: Operand, index: np.ndarray):
    """Gather rows (axis 0) of ``x``; ``index`` may have any shape."""
    xv = value_of(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= xv.shape[0]):
        raise ArgumentError(f'gather index out of range for {xv.shape[0]} rows')
    out = xv[index]

    def backward(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(out, (x,), backward, 'take')


def concat(xs: Sequence[Operand], axis: int = 0):
    values = [value_of(x) for x in xs]
    out = np.concatenate(values, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(xs), backward, 'concat')


# ------------------------------------------------------------ normalisation

def softmax(t: Operand, axis: int = -1):
    """Max-shifted softmax; slices along ``axis`` are nonnegative and sum to 1."""
    tv = value_of(t)
    axis = _check_axis(tv, axis)
    shifted = tv - np.max(tv, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record(out, (t,), backward, 'softmax')


def log_softmax(t: Operand, axis: int = -1):
    tv = value_of(t)
    axis = _check_axis(tv, axis)
    shifted = tv - np.max(tv, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return _record(out, (t,), backward, 'log_softmax')


def l2_normalize(t: Operand, axis: int = -1, eps: float = 1e-12):
    """Scale slices to unit Euclidean norm; slices with norm below ``eps`` pass through."""
    tv = value_of(t)
    axis = _check_axis(tv, axis)
    norm = np.sqrt(np.sum(tv * tv, axis=axis, keepdims=True))
    small = norm < eps
    safe = np.where(small, 1.0, norm)
    out = np.where(small, tv, tv / safe)

    def backward(g):
        projected = (g - out * np.sum(g * out, axis=axis, keepdims=True)) / safe
        return (np.where(small, g, projected),)

    return _record(out, (t,), backward, 'l2_normalize')


# ---------------------------------------------------------------- resampling

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape [n_out, n_in]."""
    m = np.zeros((n_out, n_in))
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(t: Operand, h: int, w: int):
    """Resize the two trailing axes to (h, w) with the align-corners convention."""
    tv = value_of(t)
    if h < 1 or w < 1:
        raise ArgumentError(f'target extent must be >= 1, got {h}x{w}')
    if tv.ndim < 2 or tv.shape[-2] < 1 or tv.shape[-1] < 1:
        raise ArgumentError(f'bilinear_resize needs a map with two spatial axes, got {tv.shape}')
    in_h, in_w = tv.shape[-2:]
    if (in_h, in_w) == (h, w):
        return _record(tv.copy(), (t,), lambda g: (g,), 'bilinear_resize')
    ry = _interp_matrix(in_h, h)
    rx = _interp_matrix(in_w, w)
    out = np.einsum('yY,...YX,xX->...yx', ry, tv, rx)

    def backward(g):
        return (np.einsum('yY,...yx,xX->...YX', ry, g, rx),)

    return _record(out, (t,), backward, 'bilinear_resize')
