"""Local graph-based merging over a fixed-radius graph of token anchors, with the graph stabilizer."""

from __future__ import annotations

import numpy as np

from .numerics import MLP, Module, Tensor, no_grad, ops
from .pointops import radius_graph_celllist


class EdgeNets(Module):
    """One iteration's f (edge), g (vertex update) and h (stabilizer offset) networks."""

    def __init__(self, width: int, edge_width: int, rng: np.random.Generator, act: str = "silu"):
        self.f = MLP([3 + width, edge_width, edge_width], rng, act=act)
        self.g = MLP([edge_width + width, width, width], rng, act=act)
        self.h = MLP([width, max(width // 2, 4), 3], rng, act=act)


class LGM(Module):
    def __init__(
        self,
        width: int,
        rng: np.random.Generator,
        radius: float = 0.3,
        iterations: int = 3,
        edge_width: int | None = None,
        tied: bool = True,
        aggregate: str = "max",
        stabilizer: bool = True,
    ):
        if iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not radius > 0:
            raise ValueError("radius must be positive")
        if aggregate not in ("max", "mean"):
            raise ValueError(f"unknown aggregate {aggregate!r}")
        self.width = width
        self.radius = radius
        self.iterations = iterations
        self.tied = tied
        self.aggregate = aggregate
        self.stabilizer = stabilizer
        ew = edge_width or width
        n_nets = 1 if tied else max(iterations, 1)
        self.nets = [EdgeNets(width, ew, rng) for _ in range(n_nets)]

    def build_edges(self, anchors: np.ndarray) -> np.ndarray:
        return radius_graph_celllist(anchors, self.radius).edges

    def forward(self, anchors: np.ndarray, feats: Tensor, edges: np.ndarray | None = None) -> Tensor:
        return lgm_forward(anchors, feats, self, edges)


def lgm_forward(anchors: np.ndarray, feats: Tensor, params: LGM, edges: np.ndarray | None = None) -> Tensor:
    """Iterative vertex refinement; ``anchors`` (V, 3), ``feats`` (V, C).

    Edge (i, j) sends vertex j's state to vertex i through
    f(x_j - x_i + dx_i, v_j), with dx_i = h(v_i) when the stabilizer is on.
    Vertices without edges aggregate a zero vector.
    """
    anchors = np.asarray(anchors, dtype=feats.data.dtype)
    if edges is None:
        edges = params.build_edges(anchors)
    edges = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
    n = feats.shape[0]
    dst, src = edges[:, 0], edges[:, 1]
    rel = Tensor(anchors[src] - anchors[dst], dtype=feats.data.dtype)
    reduce = ops.segment_max if params.aggregate == "max" else ops.segment_mean
    v = feats
    for it in range(params.iterations):
        net = params.nets[0 if params.tied else it]
        msg = _edge_messages(net, rel, v, src, dst, params.stabilizer)
        rho = reduce(msg, dst, n)
        v = net.g(ops.concat([rho, v], axis=-1)) + v
    return v


def _edge_messages(net: EdgeNets, rel: Tensor, v: Tensor, src, dst, stabilizer: bool) -> Tensor:
    """f(concat(rel + dx_dst, v_src)) with the first layer split by input block.

    The first layer is linear, so its vertex-dependent terms are projected
    once per vertex and gathered per edge instead of multiplying E rows.
    """
    first, rest = net.f.layers[0], net.f.layers[1:]
    w_off = ops.slice_axis(first.weight, 0, 3, axis=0)
    w_v = ops.slice_axis(first.weight, 3, first.weight.shape[0], axis=0)
    offs = rel + ops.take(net.h(v), dst) if stabilizer else rel
    pre = ops.matmul(offs, w_off) + ops.take(ops.linear(v, w_v, first.bias), src)
    act = ops.ACTIVATIONS[net.f.act]
    x = pre
    for layer in rest:
        x = layer(act(x))
    return x


def lgm_translation_check(anchors, feats: Tensor, delta, params: LGM, tol: float = 1e-9) -> bool:
    """Whether shifting every anchor by ``delta`` leaves the output unchanged within ``tol``."""
    anchors = np.asarray(anchors, dtype=np.float64)
    with no_grad():
        a = lgm_forward(anchors, feats, params).data
        b = lgm_forward(anchors + np.asarray(delta, dtype=np.float64), feats, params).data
    return bool(np.max(np.abs(a - b), initial=0.0) <= tol)
