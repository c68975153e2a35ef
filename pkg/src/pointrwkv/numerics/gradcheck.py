"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _central(f: Callable[[], Tensor], flat: np.ndarray, i, h: float, refine: int, floor: float) -> float:
    """Central difference at coordinate ``i`` of ``flat`` (a view into the tensor data).

    With ``refine`` > 0 the estimate at h is compared with the one at h/4. If
    they disagree by more than rounding noise, a max/argmin switch sits inside
    the stencil and the step keeps shrinking (at most ``refine`` times) until
    two successive estimates agree.
    """

    def diff(step):
        orig = flat[i]
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        noise = 64.0 * np.finfo(np.float64).eps * max(abs(fp), abs(fm), 1.0) / step
        return (fp - fm) / (2.0 * step), noise

    est, _ = diff(h)
    for _ in range(refine):
        h /= 4.0
        nxt, noise = diff(h)
        if abs(nxt - est) <= noise + 1e-6 * max(abs(nxt), abs(est), floor):
            return est
        est = nxt
    return est


def fd_check(
    f: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: Sequence[int] | None = None,
    floor: float = 1e-6,
    refine: int = 0,
) -> float:
    """Max relative error between backward() and central differences of ``f`` w.r.t. ``x``.

    ``f`` takes no arguments and must read ``x`` when called. ``coords``
    restricts the check to a subset of flattened coordinates. Entries with
    both gradients below ``floor`` are compared absolutely. ``refine`` allows
    that many step reductions for piecewise-smooth functions.
    """
    x.grad = None
    loss = f()
    backward(loss)
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.grad = None
    flat = x.data.reshape(-1)
    idx = np.arange(x.size) if coords is None else np.asarray(coords)
    numeric = np.empty(len(idx))
    for n, i in enumerate(idx):
        numeric[n] = _central(f, flat, i, h, refine, floor)
    return _relative_error(analytic[idx], numeric, floor)


def fd_check_many(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    refine: int = 0,
) -> dict[str, float]:
    """Run ``fd_check`` over named tensors with one shared backward pass.

    With ``max_coords`` set, at most that many coordinates per tensor are
    sampled (uniformly, without replacement).
    """
    for _, p in params:
        p.grad = None
    backward(f())
    analytic = {
        name: (np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()) for name, p in params
    }
    for _, p in params:
        p.grad = None
    rng = rng or np.random.default_rng(0)
    errors: dict[str, float] = {}
    for name, p in params:
        flat = p.data.reshape(-1)
        if max_coords is None or p.size <= max_coords:
            idx = np.arange(p.size)
        else:
            idx = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            numeric[n] = _central(f, flat, i, h, refine, floor)
        errors[name] = _relative_error(analytic[name][idx], numeric, floor)
    return errors


def fd_check_directional(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    refine: int = 0,
) -> dict[str, float]:
    """Per tensor, compare grad . d with a central difference along a random direction d.

    Every coordinate of the tensor contributes, at a cost of two function
    evaluations per tensor instead of two per coordinate.
    """
    for _, p in params:
        p.grad = None
    backward(f())
    grads = {name: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for name, p in params}
    for _, p in params:
        p.grad = None
    rng = rng or np.random.default_rng(0)
    errors: dict[str, float] = {}
    for name, p in params:
        d = rng.normal(size=p.shape)
        d /= np.linalg.norm(d) or 1.0
        orig = p.data
        t = np.zeros(1)  # step along d, perturbed in place by _central

        def along():
            p.data = orig + t[0] * d
            return f()

        numeric = np.array([_central(along, t, 0, h, refine, floor)])
        p.data = orig
        errors[name] = _relative_error(np.array([np.sum(grads[name] * d)]), numeric, floor)
    return errors
