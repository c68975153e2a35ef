"""Integrative feature modulation: token shift, data-dependent decay, bidirectional WKV, mixing layers.

Token shift ("BQE") arranges the T tokens row-major on a near-square grid
and pulls each channel quarter from one of the four grid neighbours (up,
down, left, right), zero outside the grid.

The WKV state for token t is

    wkv_t = diag(u) k_t^T v_t + sum_{i != t} diag(prod_{j strictly between i, t} w_j) k_i^T v_i

and the readout is o_t = r_t . wkv_t, per head. ``biwkv_oracle`` evaluates
this literally in O(T^2 D^2); ``biwkv_linear`` and the differentiable
``wkv`` op use one forward and one backward scan in O(T D^2).
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .numerics import LayerNorm, Module, Tensor, grad_enabled, ops, parameter
from .numerics.tensor import DimensionError


class ConfigError(ValueError):
    """A layer was configured with incompatible sizes or options."""


# -- token shift ---------------------------------------------------------------


@lru_cache(maxsize=256)
def shift_sources(t: int, mode: str = "grid") -> tuple[np.ndarray, ...]:
    """Source token index per quarter (-1 = zero padding) for a length-t sequence."""
    idx = np.arange(t)
    if mode == "grid":
        rows = math.isqrt(t - 1) + 1 if t > 0 else 0  # ceil(sqrt(t))
        cols = -(-t // rows) if rows else 0
        row, col = idx // max(cols, 1), idx % max(cols, 1)
        up = np.where(row >= 1, idx - cols, -1)
        down = np.where(idx + cols < t, idx + cols, -1)
        left = np.where(col >= 1, idx - 1, -1)
        right = np.where((col + 1 < cols) & (idx + 1 < t), idx + 1, -1)
        maps = (up, down, left, right)
    elif mode == "1d":
        maps = tuple(
            np.where((idx + o >= 0) & (idx + o < t), idx + o, -1) for o in (-1, 1, -2, 2)
        )
    else:
        raise ConfigError(f"unknown shift mode {mode!r}")
    for m in maps:
        m.setflags(write=False)
    return maps


def token_shift(x: Tensor, mode: str = "grid") -> Tensor:
    """X*: channel quarter q of token t copied from its q-th neighbour. x is (..., T, C)."""
    t, c = x.shape[-2], x.shape[-1]
    if c % 4:
        raise ConfigError(f"token shift needs C divisible by 4, got C={c}")
    q = c // 4
    plan = []
    for n, src in enumerate(shift_sources(t, mode)):
        tgt = np.flatnonzero(src >= 0)
        plan.append((tgt, src[tgt], slice(n * q, (n + 1) * q)))
    xd = x.data
    out = np.zeros_like(xd)
    for tgt, src, ch in plan:
        out[..., tgt, ch] = xd[..., src, ch]

    def bw(g):
        gx = np.zeros_like(g)
        for tgt, src, ch in plan:
            gx[..., src, ch] += g[..., tgt, ch]  # src is injective per quarter
        return (gx,)

    return Tensor._make(out, (x,), bw, "token_shift")


def bqe(x: Tensor, mu: Tensor, xs: Tensor | None = None, mode: str = "literal", shift: str = "grid") -> Tensor:
    """x + (1 - mu) * X*; ``mode='lerp'`` gives mu * x + (1 - mu) * X* instead."""
    if x.shape[-1] % 4:
        raise ConfigError(f"BQE needs C divisible by 4, got C={x.shape[-1]}")
    xs = token_shift(x, shift) if xs is None else xs
    mixed = ops.rsub_vec(mu, xs)
    if mode == "literal":
        return x + mixed
    if mode == "lerp":
        return ops.mul_vec(x, mu) + mixed
    raise ConfigError(f"unknown BQE mode {mode!r}")


# -- WKV kernels -----------------------------------------------------------------


def _check_wkv(r, k, v, w, u) -> None:
    shapes = {a.shape for a in (r, k, v, w)}
    if len(shapes) != 1:
        raise DimensionError(f"wkv: r/k/v/w shapes differ: {sorted(shapes)}")
    shp = r.shape
    if len(shp) < 3 or u.shape != shp[-2:]:
        raise DimensionError(f"wkv: expected (..., T, H, D) inputs and (H, D) boost, got {shp} and {u.shape}")


def biwkv_oracle(R, K, V, w, u, bidirectional: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Definitional double loop over (t, i). Inputs (T, H, D); returns (wkv (T,H,D,D), o (T,H,D))."""
    R, K, V, w, u = (np.asarray(a) for a in (R, K, V, w, u))
    _check_wkv(R, K, V, w, u)
    T, H, D = R.shape
    wkv = np.zeros((T, H, D, D), dtype=R.dtype)
    for t in range(T):
        acc = u[:, :, None] * (K[t][:, :, None] * V[t][:, None, :])
        for i in range(T):
            if i == t or (not bidirectional and i > t):
                continue
            lo, hi = (i, t) if i < t else (t, i)
            decay = np.prod(w[lo + 1 : hi], axis=0) if hi - lo > 1 else np.ones((H, D), dtype=R.dtype)
            acc = acc + decay[:, :, None] * (K[i][:, :, None] * V[i][:, None, :])
        wkv[t] = acc
    o = np.einsum("thd,thde->the", R, wkv)
    return wkv, o


def biwkv_linear(R, K, V, w, u, bidirectional: bool = True) -> np.ndarray:
    """Two-pass scan; inputs (..., T, H, D), output (..., T, H, D).

    Working state is one D x D matrix per head and direction; nothing of
    size T x T (or T x D x D) is allocated.
    """
    R, K, V, w, u = (np.asarray(a) for a in (R, K, V, w, u))
    _check_wkv(R, K, V, w, u)
    T = R.shape[-3]
    lead = R.shape[:-3]
    hd = R.shape[-2:]
    o = ((R * u * K).sum(axis=-1, keepdims=True) * V).astype(R.dtype)
    state = np.zeros(lead + hd + (hd[-1],), dtype=R.dtype)
    for t in range(T):
        rt = R[..., t, :, :]
        o[..., t, :, :] += (rt[..., :, None] * state).sum(axis=-2)
        state *= w[..., t, :, :, None]
        state += K[..., t, :, :, None] * V[..., t, :, None, :]
    if bidirectional:
        state[...] = 0.0
        for t in range(T - 1, -1, -1):
            rt = R[..., t, :, :]
            o[..., t, :, :] += (rt[..., :, None] * state).sum(axis=-2)
            state *= w[..., t, :, :, None]
            state += K[..., t, :, :, None] * V[..., t, :, None, :]
    return o


def wkv(r: Tensor, k: Tensor, v: Tensor, w: Tensor, u: Tensor, bidirectional: bool = True) -> Tensor:
    """Differentiable WKV readout; inputs (..., T, H, D), boost (H, D)."""
    _check_wkv(r.data, k.data, v.data, w.data, u.data)
    tracked = grad_enabled() and any(a.requires_grad for a in (r, k, v, w, u))
    if not tracked:
        out = biwkv_linear(r.data, k.data, v.data, w.data, u.data, bidirectional)
        return Tensor._make(out, (r, k, v, w, u), None, "wkv")

    # time-major copies: (T, ..., H, D)
    rd, kd, vd, wd = (np.moveaxis(a.data, -3, 0) for a in (r, k, v, w))
    ud = u.data
    T = rd.shape[0]
    kv = kd[..., :, None] * vd[..., None, :]
    sf = np.empty_like(kv)
    state = np.zeros_like(kv[0])
    for t in range(T):
        sf[t] = state
        state = wd[t][..., None] * state + kv[t]
    if bidirectional:
        sb = np.empty_like(kv)
        state = np.zeros_like(kv[0])
        for t in range(T - 1, -1, -1):
            sb[t] = state
            state = wd[t][..., None] * state + kv[t]
        ctx = sf + sb
    else:
        sb = None
        ctx = sf
    full = ud[..., None] * kv + ctx
    out = np.einsum("...d,...de->...e", rd, full)

    def bw(g):
        g = np.moveaxis(g, -3, 0)
        rg = rd[..., :, None] * g[..., None, :]
        dr = np.einsum("...de,...e->...d", full, g)
        dkv = ud[..., None] * rg
        du = (rg * kv).sum(axis=-1).reshape((-1,) + ud.shape).sum(axis=0)
        dw = np.zeros_like(wd)
        adj = np.zeros_like(kv[0])
        for t in range(T - 1, -1, -1):
            # adj is dL/dS_f(t+1) where S_f(t+1) = w_t S_f(t) + kv_t
            dw[t] += (sf[t] * adj).sum(axis=-1)
            dkv[t] += adj
            adj = rg[t] + wd[t][..., None] * adj
        if sb is not None:
            adj = np.zeros_like(kv[0])
            for t in range(T):
                # adj is dL/dS_b(t-1) where S_b(t-1) = w_t S_b(t) + kv_t
                dw[t] += (sb[t] * adj).sum(axis=-1)
                dkv[t] += adj
                adj = rg[t] + wd[t][..., None] * adj
        dk = np.einsum("...de,...e->...d", dkv, vd)
        dv = np.einsum("...de,...d->...e", dkv, kd)
        back = lambda a: np.moveaxis(a, 0, -3)  # noqa: E731
        return back(dr), back(dk), back(dv), back(dw), du

    return Tensor._make(np.moveaxis(out, 0, -3), (r, k, v, w, u), bw, "wkv")


# -- mixing layers ---------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    c = x.shape[-1]
    return ops.reshape(x, x.shape[:-1] + (heads, c // heads))


def _merge_heads(x: Tensor) -> Tensor:
    return ops.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


class SpatialMixing(Module):
    """Token-shifted R/K/V/G projections, data-dependent decay, WKV, gated group-normed output.

    Toggles: ``use_bqe`` (token shift on/off), ``bidirectional`` (False keeps
    only the i < t half of the sum), ``bqe_mode`` ('literal' or 'lerp'),
    ``shift`` ('grid' or '1d').
    """

    def __init__(
        self,
        width: int,
        heads: int,
        rng: np.random.Generator,
        d_lora: int | None = None,
        use_bqe: bool = True,
        bidirectional: bool = True,
        bqe_mode: str = "literal",
        shift: str = "grid",
    ):
        if width % heads:
            raise ConfigError(f"width {width} not divisible by heads {heads}")
        if width % 4:
            raise ConfigError(f"width {width} not divisible by 4")
        c = width
        self.width, self.heads = c, heads
        self.d_lora = d_lora or max(c // 8, 8)
        self.use_bqe, self.bidirectional = use_bqe, bidirectional
        self.bqe_mode, self.shift = bqe_mode, shift
        self.ln = LayerNorm(c)
        self.mu_r, self.mu_k, self.mu_v, self.mu_g, self.mu_w = (
            parameter(rng.uniform(0.3, 0.7, size=c)) for _ in range(5)
        )
        d = c // heads
        self.lam = parameter(np.tile(np.linspace(-3.0, 0.0, d), heads))
        self.A = parameter(rng.normal(0.0, 0.1, size=(c, self.d_lora)))
        self.B = parameter(rng.normal(0.0, 0.02, size=(self.d_lora, c)))
        self.u = parameter(rng.uniform(0.25, 0.75, size=(heads, d)))
        bound = 1.0 / np.sqrt(c)
        self.W_r, self.W_k, self.W_v, self.W_g = (
            parameter(rng.uniform(-bound, bound, size=(c, c))) for _ in range(4)
        )
        self.W_o = parameter(np.zeros((c, c)))  # residual branch starts as identity
        self.ln_out = LayerNorm(c, groups=heads)

    def _shifted(self, x: Tensor, mu: Tensor, xs: Tensor | None) -> Tensor:
        if not self.use_bqe:
            return x
        return bqe(x, mu, xs, self.bqe_mode, self.shift)

    def nu(self, c: Tensor) -> Tensor:
        return ops.add_vec(ops.matmul(ops.tanh(ops.matmul(c, self.A)), self.B), self.lam)

    def decay(self, x: Tensor, xs: Tensor | None = None) -> Tensor:
        """Per-token, per-channel decay in (0, 1) from the normalized input x."""
        if self.use_bqe:
            xs = token_shift(x, self.shift) if xs is None else xs
            first = self.nu(self._shifted(x, self.mu_w, xs))
            wx = x + (1.0 - first) * xs
        else:
            wx = x
        d = self.nu(wx)
        return ops.exp(-ops.exp(d))

    def forward(self, x: Tensor) -> Tensor:
        h = self.heads
        xn = self.ln(x)
        xs = token_shift(xn, self.shift) if self.use_bqe else None
        r = ops.matmul(self._shifted(xn, self.mu_r, xs), self.W_r)
        k = ops.matmul(self._shifted(xn, self.mu_k, xs), self.W_k)
        v = ops.matmul(self._shifted(xn, self.mu_v, xs), self.W_v)
        g = ops.matmul(self._shifted(xn, self.mu_g, xs), self.W_g)
        w = self.decay(xn, xs)
        o = wkv(
            _split_heads(r, h), _split_heads(k, h), _split_heads(v, h), _split_heads(w, h),
            self.u, self.bidirectional,
        )
        y = ops.silu(g) * self.ln_out(_merge_heads(o))
        return ops.matmul(y, self.W_o)


class ChannelMixing(Module):
    def __init__(
        self,
        width: int,
        rng: np.random.Generator,
        hidden_ratio: int = 4,
        use_bqe: bool = True,
        bqe_mode: str = "literal",
        shift: str = "grid",
    ):
        if width % 4:
            raise ConfigError(f"width {width} not divisible by 4")
        c, ch = width, hidden_ratio * width
        self.width, self.hidden = c, ch
        self.use_bqe, self.bqe_mode, self.shift = use_bqe, bqe_mode, shift
        self.ln = LayerNorm(c)
        self.mu_r = parameter(rng.uniform(0.3, 0.7, size=c))
        self.mu_k = parameter(rng.uniform(0.3, 0.7, size=c))
        self.W_r = parameter(rng.uniform(-1, 1, size=(c, c)) / np.sqrt(c))
        self.W_k = parameter(rng.uniform(-1, 1, size=(c, ch)) / np.sqrt(c))
        self.W_v = parameter(rng.uniform(-1, 1, size=(ch, c)) / np.sqrt(ch))
        self.W_o = parameter(np.zeros((c, c)))

    def forward(self, x: Tensor) -> Tensor:
        xn = self.ln(x)
        if self.use_bqe:
            xs = token_shift(xn, self.shift)
            xr = bqe(xn, self.mu_r, xs, self.bqe_mode, self.shift)
            xk = bqe(xn, self.mu_k, xs, self.bqe_mode, self.shift)
        else:
            xr = xk = xn
        rc = ops.matmul(xr, self.W_r)
        kc = ops.matmul(xk, self.W_k)
        return ops.matmul(ops.sigmoid(rc) * ops.matmul(ops.squared_relu(kc), self.W_v), self.W_o)


def spatial_mixing(x: Tensor, params: SpatialMixing) -> Tensor:
    return params(x)


def channel_mixing(x: Tensor, params: ChannelMixing) -> Tensor:
    return params(x)


def compute_decay(x: Tensor, params: SpatialMixing) -> Tensor:
    return params.decay(x)


# -- cost model --------------------------------------------------------------------


def spatial_mixing_flops(t: int, c: int, h: int, d_lora: int | None = None) -> int:
    """Closed-form FLOP count of one spatial-mixing forward pass.

    Multiply-adds count 2, every other elementwise op 1; layer norms 8 per element.
    """
    L = d_lora or max(c // 8, 8)
    d = c // h
    proj = 2 * t * c * c * 5  # R, K, V, G, O
    shift = 5 * 2 * t * c
    decay = 2 * (4 * t * c * L + t * L + t * c) + 3 * t * c + 3 * t * c
    scan = 10 * t * h * d * d  # outer, two decayed updates, context sum, readout
    out = 8 * t * c + 4 * t * c + t * c
    return proj + shift + decay + scan + 8 * t * c + out
