"""Patch tokenization: mini-PointNet over local neighborhoods plus a learned positional encoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import MLP, Linear, Module, Tensor, ops
from .pointops import ScalePyramid


@dataclass
class TokenSequence:
    tokens: Tensor
    anchors: np.ndarray
    scale_id: int
    point_index: np.ndarray  # position of each token within its pyramid level

    def __len__(self) -> int:
        return self.tokens.shape[-2]


class MiniPointNet(Module):
    """Shared per-point layers, max-pool over the patch, then an output map."""

    def __init__(self, width: int, rng: np.random.Generator, in_features: int = 0, act: str = "silu"):
        self.shared = MLP([3 + in_features, width // 2, width], rng, act=act)
        self.out = Linear(width, width, rng)
        self.act = act

    def point_features(self, patch: Tensor) -> Tensor:
        return ops.ACTIVATIONS[self.act](self.shared(patch))

    def forward(self, patch: Tensor, feats: Tensor | None = None) -> Tensor:
        """``patch`` is (..., k, 3) neighbor-minus-center offsets; returns (..., C)."""
        if patch.shape[-2] == 0:
            raise ValueError("mini_pointnet: empty patch")
        x = patch if feats is None else ops.concat([patch, feats], axis=-1)
        return self.out(ops.max(self.point_features(x), axis=-2))


class PositionalEncoding(Module):
    def __init__(self, width: int, rng: np.random.Generator, hidden: int = 128, act: str = "silu"):
        self.mlp = MLP([3, hidden, width], rng, act=act)

    def forward(self, anchors: Tensor) -> Tensor:
        return self.mlp(anchors)


class PatchEmbedding(Module):
    def __init__(self, width: int, rng: np.random.Generator, pe_hidden: int = 128, use_pe: bool = True):
        self.pointnet = MiniPointNet(width, rng)
        self.pos = PositionalEncoding(width, rng, hidden=pe_hidden)
        self.use_pe = use_pe

    def forward(self, rel: np.ndarray | Tensor, centers: np.ndarray | Tensor) -> Tensor:
        rel = rel if isinstance(rel, Tensor) else Tensor(rel)
        tok = self.pointnet(rel)
        if not self.use_pe:
            return tok
        centers = centers if isinstance(centers, Tensor) else Tensor(centers)
        return tok + self.pos(centers)


def patch_offsets(pyr: ScalePyramid, s: int, which: np.ndarray | None = None) -> np.ndarray:
    """(T, k, 3) neighbor-minus-center offsets for the selected level-s points."""
    sc = pyr.scales[s]
    which = np.flatnonzero(sc.visible) if which is None else which
    parent = pyr.parent_coords(s)
    return parent[sc.neighbors[which]] - sc.coords[which][:, None, :]


def embed_scale(pyr: ScalePyramid, s: int, params: PatchEmbedding) -> TokenSequence:
    """One token per visible level-s point."""
    which = np.flatnonzero(pyr.scales[s].visible)
    anchors = pyr.scales[s].coords[which]
    tokens = params(patch_offsets(pyr, s, which), anchors)
    return TokenSequence(tokens, anchors.copy(), s, which)
