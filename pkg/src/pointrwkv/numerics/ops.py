"""Differentiable primitives.

Shape alignment is explicit: binary elementwise ops accept matching shapes
or a Python scalar, and the ``*_vec`` variants take a vector that runs
along the last axis.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import sparse

from .tensor import DimensionError, Tensor, as_tensor

_Scalar = (int, float, np.floating, np.integer)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sum_leading(g: np.ndarray, ndim: int) -> np.ndarray:
    return g.reshape(-1, *g.shape[g.ndim - ndim :]).sum(axis=0)


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, _Scalar):
        return Tensor._make(a.data + b, (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, _Scalar):
        return Tensor._make(a.data - b, (a,), lambda g: (g,), "sub_scalar")
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, _Scalar):
        return Tensor._make(a.data * b, (a,), lambda g: (g * b,), "mul_scalar")
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def add_vec(x: Tensor, v: Tensor) -> Tensor:
    """x + v with v running along the last axis of x."""
    if v.shape != x.shape[-1:]:
        raise DimensionError(f"add_vec: vector {v.shape} does not match last axis of {x.shape}")
    return Tensor._make(x.data + v.data, (x, v), lambda g: (g, _sum_leading(g, 1)), "add_vec")


def mul_vec(x: Tensor, v: Tensor) -> Tensor:
    """x * v with v running along the last axis of x."""
    if v.shape != x.shape[-1:]:
        raise DimensionError(f"mul_vec: vector {v.shape} does not match last axis of {x.shape}")
    xd, vd = x.data, v.data
    return Tensor._make(
        xd * vd, (x, v), lambda g: (g * vd, _sum_leading(g * xd, 1)), "mul_vec"
    )


def rsub_vec(v: Tensor, x: Tensor) -> Tensor:
    """(1 - v) * x, v along the last axis; the token-shift mixing factor."""
    if v.shape != x.shape[-1:]:
        raise DimensionError(f"rsub_vec: vector {v.shape} does not match last axis of {x.shape}")
    vd, xd = v.data, x.data
    f = 1.0 - vd
    return Tensor._make(
        xd * f, (v, x), lambda g: (-_sum_leading(g * xd, 1), g * f), "rsub_vec"
    )


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., m, k] @ b[k, n]; leading axes of a are batch axes."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add_vec(y, b)


# -- reductions ---------------------------------------------------------------


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis, keepdims), 1.0 / n)


def max(x: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis).squeeze(axis)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (gx,)

    return Tensor._make(out, (x,), bw, "max")


# -- shape manipulation -------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return Tensor._make(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise DimensionError("concat: no parts")
    nd = parts[0].ndim
    ax = axis % nd
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != nd or p.shape[:ax] + p.shape[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise DimensionError(
                f"concat: parts disagree off axis {axis}: {ref} vs {p.shape}"
            )
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def bw(g):
        sl = [slice(None)] * nd
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return Tensor._make(
        np.concatenate([p.data for p in parts], axis=ax), tuple(parts), bw, "concat"
    )


def concat_last_axis(parts: Sequence[Tensor]) -> Tensor:
    return concat(parts, axis=-1)


def slice_axis(x: Tensor, lo: int, hi: int, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    n = x.shape[ax]
    if not (0 <= lo < hi <= n):
        raise IndexError(f"slice [{lo}, {hi}) out of range for extent {n}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(lo, hi)
    sl = tuple(sl)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[sl] = g
        return (gx,)

    return Tensor._make(x.data[sl], (x,), bw, "slice")


def slice_last_axis(x: Tensor, lo: int, hi: int) -> Tensor:
    return slice_axis(x, lo, hi, axis=-1)


def _scatter_rows(idx: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """out[i] = sum of rows[j] over idx[j] == i, via a sparse selection matrix."""
    if idx.size == 0:
        return np.zeros((n,) + rows.shape[1:], dtype=rows.dtype)
    flat = rows.reshape(rows.shape[0], -1)
    sel = sparse.csr_matrix(
        (np.ones(idx.size, dtype=rows.dtype), (idx, np.arange(idx.size))), shape=(n, idx.size)
    )
    return np.asarray(sel @ flat, dtype=rows.dtype).reshape((n,) + rows.shape[1:])


def take(x: Tensor, idx: np.ndarray, pad: bool = False) -> Tensor:
    """Gather rows of ``x`` along axis 0.

    With ``pad=True`` an index of -1 yields a zero row; the output has shape
    ``idx.shape + x.shape[1:]``.
    """
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[0]
    if idx.size and (idx.max() >= n or idx.min() < (-1 if pad else 0)):
        raise IndexError(f"take: index out of range for {n} rows")
    rows = x.shape[1:]
    flat = idx.reshape(-1)
    if pad:
        keep = flat >= 0
        out = x.data[np.where(keep, flat, 0)]
        out[~keep] = 0.0
        out = out.reshape(idx.shape + rows)
    else:
        keep = None
        out = x.data[idx]

    def bw(g):
        g = g.reshape((-1,) + rows)
        if keep is None:
            return (_scatter_rows(flat, g, n),)
        return (_scatter_rows(flat[keep], g[keep], n),)

    return Tensor._make(out, (x,), bw, "take")


# -- segment reductions (graph aggregation) -----------------------------------


def segment_max(x: Tensor, seg: np.ndarray, n_segments: int) -> Tensor:
    """Row-wise max of ``x`` grouped by ``seg``; empty segments give zeros."""
    seg = np.asarray(seg, dtype=np.intp)
    e, c = x.shape
    out = np.zeros((n_segments, c), dtype=x.data.dtype)
    if e == 0:
        return Tensor._make(out, (x,), lambda g: (np.zeros((0, c), dtype=g.dtype),), "segment_max")
    if np.all(seg[1:] >= seg[:-1]):
        order = None
        ss, xs = seg, x.data
    else:
        order = np.argsort(seg, kind="stable")
        ss, xs = seg[order], x.data[order]
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    owners = ss[starts]
    red = np.maximum.reduceat(xs, starts, axis=0)
    out[owners] = red
    # gradient goes to the first sorted row attaining the max of its segment
    group = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, e]))
    hit = xs == red[group]
    if np.count_nonzero(hit) > len(starts) * c:  # ties: keep only the first hit
        first = np.minimum.reduceat(np.where(hit, np.arange(e)[:, None], e), starts, axis=0)
        hit = np.zeros_like(hit)
        hit[first, np.arange(c)] = True
    if order is not None:
        hit[order] = hit.copy()
        group[order] = group.copy()
    def bw(g):
        return (np.where(hit, g[owners][group], 0.0).astype(g.dtype, copy=False),)

    return Tensor._make(out, (x,), bw, "segment_max")


def segment_mean(x: Tensor, seg: np.ndarray, n_segments: int) -> Tensor:
    """Row-wise mean of ``x`` grouped by ``seg``; empty segments give zeros."""
    seg = np.asarray(seg, dtype=np.intp)
    e, c = x.shape
    counts = np.bincount(seg, minlength=n_segments).astype(x.data.dtype)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    out = _scatter_rows(seg, x.data, n_segments) * inv[:, None]
    return Tensor._make(out, (x,), lambda g: ((g * inv[:, None])[seg],), "segment_mean")


# -- activations --------------------------------------------------------------


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y,), "exp")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return Tensor._make(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),), "silu")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    m = xd > 0
    return Tensor._make(np.where(m, xd, 0.0), (x,), lambda g: (g * m,), "relu")


def squared_relu(x: Tensor) -> Tensor:
    r = np.maximum(x.data, 0.0)
    return Tensor._make(r * r, (x,), lambda g: (2.0 * g * r,), "squared_relu")


ACTIVATIONS = {"silu": silu, "relu": relu, "tanh": tanh, "sigmoid": sigmoid}


# -- normalization and losses -------------------------------------------------


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, groups: int = 1) -> Tensor:
    """Normalize the last axis (split into ``groups`` equal chunks) with population variance."""
    c = x.shape[-1]
    if c == 0:
        raise DimensionError("layernorm: empty normalized axis")
    if eps <= 0:
        raise ValueError("layernorm: eps must be positive")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} vs C={c}")
    if c % groups:
        raise DimensionError(f"layernorm: C={c} not divisible by groups={groups}")
    gs = c // groups
    xg = x.data.reshape(x.shape[:-1] + (groups, gs))
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).reshape(x.shape)
    gd, bd = gamma.data, beta.data

    def bw(g):
        gxhat = (g * gd).reshape(xg.shape)
        xh = xhat.reshape(xg.shape)
        gx = rstd * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xh * (gxhat * xh).mean(axis=-1, keepdims=True)
        )
        return gx.reshape(x.shape), _sum_leading(g * xhat, 1), _sum_leading(g, 1)

    return Tensor._make(xhat * gd + bd, (x, gamma, beta), bw, "layernorm")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over a batch of rows."""
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    rows = np.arange(z.shape[0])
    loss = np.mean(lse[:, 0] - z[rows, labels])
    p = np.exp(z - lse)

    def bw(g):
        gz = p.copy()
        gz[rows, labels] -= 1.0
        return (gz * (g / z.shape[0]),)

    return Tensor._make(np.asarray(loss, dtype=z.dtype), (logits,), bw, "cross_entropy")


def chamfer_distance(pred: Tensor, target: Tensor) -> Tensor:
    """Batched symmetric Chamfer distance on squared norms, averaged over the batch.

    ``pred`` is (M, k, 3) and ``target`` is (M, k', 3).
    """
    p, t = pred.data, target.data
    if p.ndim != 3 or t.ndim != 3 or p.shape[0] != t.shape[0] or p.shape[2] != t.shape[2]:
        raise DimensionError(f"chamfer: shapes {p.shape} and {t.shape}")
    if p.shape[1] == 0 or t.shape[1] == 0:
        raise ValueError("chamfer: empty point set")
    diff = p[:, :, None, :] - t[:, None, :, :]
    d = (diff * diff).sum(axis=-1)
    j_star = d.argmin(axis=2)
    i_star = d.argmin(axis=1)
    m, k, _ = p.shape
    kt = t.shape[1]
    val = d.min(axis=2).mean(axis=1) + d.min(axis=1).mean(axis=1)
    rows = np.arange(m)[:, None]

    def bw(g):
        s = g / m
        near_t = t[rows, j_star]
        gp = 2.0 * (p - near_t) * (s / k)
        near_p = p[rows, i_star]
        gt_to_p = 2.0 * (near_p - t) * (s / kt)
        np.add.at(gp, (np.repeat(np.arange(m), kt), i_star.reshape(-1)), gt_to_p.reshape(-1, 3))
        gt = -2.0 * (p[rows, i_star] - t) * (s / kt)
        gt_from_p = np.zeros_like(t)
        np.add.at(
            gt_from_p,
            (np.repeat(np.arange(m), k), j_star.reshape(-1)),
            (-2.0 * (p - near_t) * (s / k)).reshape(-1, 3),
        )
        return gp, gt + gt_from_p

    return Tensor._make(np.asarray(val.mean(), dtype=p.dtype), (pred, target), bw, "chamfer")
