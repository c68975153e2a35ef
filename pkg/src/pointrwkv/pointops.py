"""Point-cloud geometry: normalization, sampling, grouping, radius graphs, masking."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class PointCloud:
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 3:
            raise ValueError(f"point cloud must be N x 3, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("point cloud has non-finite coordinates")
        object.__setattr__(self, "coords", c)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def __len__(self) -> int:
        return self.n


def _coords(pc) -> np.ndarray:
    return pc.coords if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)


def normalize(pc: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1.

    A cloud of identical points maps to all zeros.
    """
    c = _coords(pc)
    if len(c) == 0:
        raise ValueError("normalize: empty cloud")
    c = c - c.mean(axis=0)
    r = np.sqrt((c * c).sum(axis=1)).max()
    if r == 0.0:
        return PointCloud(np.zeros_like(c))
    return PointCloud(c / r)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return (d * d).sum(axis=-1)


def fps(pc, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy furthest point sampling; ties go to the smallest index."""
    c = _coords(pc)
    n = len(c)
    if not 1 <= m <= n:
        raise ValueError(f"fps: need 1 <= m <= N, got m={m}, N={n}")
    if not 0 <= seed_index < n:
        raise ValueError(f"fps: seed index {seed_index} out of range")
    out = np.empty(m, dtype=np.intp)
    out[0] = seed_index
    diff = c - c[seed_index]
    mind = (diff * diff).sum(axis=1)
    for s in range(1, m):
        nxt = int(np.argmax(mind))
        out[s] = nxt
        diff = c - c[nxt]
        np.minimum(mind, (diff * diff).sum(axis=1), out=mind)
    return out


def knn(query, base, k: int, chunk: int = 512) -> np.ndarray:
    """Indices of the k nearest base points per query, ascending; ties by index."""
    q, b = _coords(query), _coords(base)
    if k > len(b):
        raise ValueError(f"knn: k={k} exceeds base size {len(b)}")
    if k < 1:
        raise ValueError("knn: k must be positive")
    out = np.empty((len(q), k), dtype=np.intp)
    for lo in range(0, len(q), chunk):
        d = _sqdist(q[lo : lo + chunk], b)
        if k < len(b):
            part = np.argpartition(d, k - 1, axis=1)[:, :k]
            kth = np.take_along_axis(d, part, 1).max(axis=1, keepdims=True)
            # keep every candidate tied with the k-th distance so index tie-breaks are exact
            cand = d <= kth
            width = int(cand.sum(axis=1).max())
            if width <= 4 * k:
                idx = np.argsort(~cand, axis=1, kind="stable")[:, :width]
                dd = np.take_along_axis(d, idx, 1)
                dd = np.where(np.take_along_axis(cand, idx, 1), dd, np.inf)
                o = np.lexsort((idx, dd), axis=1)[:, :k]
                out[lo : lo + chunk] = np.take_along_axis(idx, o, 1)
                continue
        out[lo : lo + chunk] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


# -- fixed-radius neighbor graph -------------------------------------------------


@dataclass
class RadiusGraph:
    coords: np.ndarray
    edges: np.ndarray
    radius: float
    candidates: int = 0

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.edges}


def _check_radius(r: float) -> None:
    if not (np.isfinite(r) and r > 0):
        raise ValueError(f"radius must be finite and positive, got {r}")


def radius_graph_celllist(pc, r: float) -> RadiusGraph:
    """All ordered pairs (i, j), i != j, with ||x_i - x_j|| < r, via a cubic cell list.

    Points are binned into cells of side r, so every qualifying pair sits in
    the same or an adjacent cell; only those 27-cell candidates are tested.
    Edges come back sorted lexicographically.
    """
    _check_radius(r)
    c = _coords(pc)
    n = len(c)
    if n < 2:
        return RadiusGraph(c, np.zeros((0, 2), dtype=np.intp), r)
    cell = np.floor((c - c.min(axis=0)) / r).astype(np.int64)
    dims = cell.max(axis=0) + 3
    key = ((cell[:, 0] + 1) * dims[1] + (cell[:, 1] + 1)) * dims[2] + (cell[:, 2] + 1)
    order = np.argsort(key, kind="stable")
    skey = key[order]
    ukeys, starts, counts = np.unique(skey, return_index=True, return_counts=True)
    r2 = r * r
    src_parts, dst_parts = [], []
    n_cand = 0
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                nkey = key + (dx * dims[1] + dy) * dims[2] + dz
                pos = np.searchsorted(ukeys, nkey)
                pos_c = np.minimum(pos, len(ukeys) - 1)
                hit = ukeys[pos_c] == nkey
                qi = np.flatnonzero(hit)
                if qi.size == 0:
                    continue
                st = starts[pos_c[qi]]
                ct = counts[pos_c[qi]]
                total = int(ct.sum())
                n_cand += total
                src = np.repeat(qi, ct)
                offs = np.arange(total) - np.repeat(np.cumsum(ct) - ct, ct)
                dst = order[np.repeat(st, ct) + offs]
                d = c[src] - c[dst]
                keep = ((d * d).sum(axis=1) < r2) & (src != dst)
                src_parts.append(src[keep])
                dst_parts.append(dst[keep])
    src = np.concatenate(src_parts)
    dst = np.concatenate(dst_parts)
    o = np.lexsort((dst, src))
    edges = np.stack([src[o], dst[o]], axis=1).astype(np.intp)
    return RadiusGraph(c, edges, r, candidates=n_cand)


def radius_graph_bruteforce(pc, r: float) -> RadiusGraph:
    """O(N^2) reference for the radius graph."""
    _check_radius(r)
    c = _coords(pc)
    n = len(c)
    src_parts, dst_parts = [], []
    for lo in range(0, n, 512):
        d = _sqdist(c[lo : lo + 512], c)
        i, j = np.nonzero(d < r * r)
        i = i + lo
        keep = i != j
        src_parts.append(i[keep])
        dst_parts.append(j[keep])
    src = np.concatenate(src_parts) if src_parts else np.zeros(0, np.intp)
    dst = np.concatenate(dst_parts) if dst_parts else np.zeros(0, np.intp)
    o = np.lexsort((dst, src))
    return RadiusGraph(c, np.stack([src[o], dst[o]], axis=1).astype(np.intp), r, candidates=n * n)


# -- multi-scale pyramid and masking ---------------------------------------------


@dataclass
class Scale:
    """One pyramid level.

    ``indices`` select this level's points from the previous level (identity at
    the first level); ``neighbors`` are k-NN indices into the previous level
    (into the level itself for the first); ``visible`` is the encoder mask.
    """

    indices: np.ndarray
    coords: np.ndarray
    neighbors: np.ndarray
    k: int
    visible: np.ndarray

    @property
    def size(self) -> int:
        return len(self.coords)

    @property
    def n_visible(self) -> int:
        return int(self.visible.sum())


@dataclass
class ScalePyramid:
    scales: list[Scale] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scales)

    def __getitem__(self, s: int) -> Scale:
        return self.scales[s]

    def parent_coords(self, s: int) -> np.ndarray:
        """Coordinates the level-s neighbor lists index into."""
        return self.scales[s - 1].coords if s > 0 else self.scales[0].coords

    def root_index(self, s: int) -> np.ndarray:
        """Index of each level-s point in the input cloud."""
        idx = self.scales[s].indices
        for t in range(s - 1, -1, -1):
            idx = self.scales[t].indices[idx]
        return idx


def build_pyramid(pc, scale_sizes, ks, seed_index: int = 0) -> ScalePyramid:
    """FPS/k-NN pyramid; level 0 is the input, level s+1 is FPS of level s.

    Level 0's neighbor lists are k-NN within the input itself. The
    construction is deterministic (FPS starts at ``seed_index``).
    """
    c = _coords(pc)
    sizes = [int(s) for s in scale_sizes]
    ks = [int(k) for k in ks]
    if not sizes or sizes[0] != len(c):
        raise ValueError(f"first scale size must equal N={len(c)}, got {sizes[:1]}")
    if any(a <= b for a, b in zip(sizes[:-1], sizes[1:])):
        raise ValueError(f"scale sizes must strictly decrease: {sizes}")
    if len(ks) != len(sizes):
        raise ValueError(f"need one k per scale: {len(ks)} ks for {len(sizes)} scales")
    ident = np.arange(len(c), dtype=np.intp)
    levels = [Scale(ident, c, knn(c, c, ks[0]), ks[0], np.ones(len(c), dtype=bool))]
    for size, k in zip(sizes[1:], ks[1:]):
        prev = levels[-1].coords
        sel = fps(prev, size, seed_index=min(seed_index, len(prev) - 1))
        pts = prev[sel]
        levels.append(Scale(sel, pts, knn(pts, prev, k), k, np.ones(size, dtype=bool)))
    return ScalePyramid(levels)


def apply_multiscale_mask(pyr: ScalePyramid, ratio: float, seed: int) -> ScalePyramid:
    """Mask the coarsest level at ``ratio`` and back-project visibility fine-ward.

    floor((1 - ratio) * size) coarsest points stay visible; a finer level's
    visible set is the union of the k-NN lists of the next coarser level's
    visible points. Ratio 0 disables masking: every point of every level stays
    visible (the k-NN union alone need not cover a finer level).
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    if ratio == 0.0:
        return ScalePyramid([replace(sc, visible=np.ones(sc.size, dtype=bool)) for sc in pyr.scales])
    rng = np.random.default_rng(seed)
    top = pyr.scales[-1]
    n_vis = int(np.floor((1.0 - ratio) * top.size + 1e-9))
    vis = np.zeros(top.size, dtype=bool)
    vis[rng.permutation(top.size)[:n_vis]] = True
    masks = [vis]
    for s in range(len(pyr) - 1, 0, -1):
        below = np.zeros(pyr.scales[s - 1].size, dtype=bool)
        below[pyr.scales[s].neighbors[masks[-1]].reshape(-1)] = True
        masks.append(below)
    masks.reverse()
    return ScalePyramid([replace(sc, visible=m) for sc, m in zip(pyr.scales, masks)])


def check_visibility_consistency(pyr: ScalePyramid) -> bool:
    """Every visible point of a finer level is a k-NN (recomputed) of a visible coarser point."""
    for s in range(len(pyr) - 1):
        fine, coarse = pyr.scales[s], pyr.scales[s + 1]
        nb = knn(coarse.coords[coarse.visible], fine.coords, coarse.k)
        covered = np.zeros(fine.size, dtype=bool)
        covered[nb.reshape(-1)] = True
        if np.any(fine.visible & ~covered) or np.any(covered & ~fine.visible):
            return False
    return True


# -- point-cloud files -----------------------------------------------------------

PCB_MAGIC = b"PCB1"


def read_points(path: str | Path) -> PointCloud:
    """Load a cloud from text ('x y z' per line) or binary PCB1 format."""
    blob = Path(path).read_bytes()
    if blob[:4] == PCB_MAGIC:
        (n,) = struct.unpack_from("<Q", blob, 4)
        arr = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=12)
        return PointCloud(arr.reshape(n, 3).astype(np.float64))
    rows = [line.split() for line in blob.decode("utf-8").splitlines() if line.strip()]
    if any(len(r) != 3 for r in rows):
        raise ValueError(f"{path}: every line must hold exactly three numbers")
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def write_points(path: str | Path, pc: PointCloud, binary: bool = False) -> None:
    c = _coords(pc)
    if binary:
        with open(path, "wb") as fh:
            fh.write(PCB_MAGIC)
            fh.write(struct.pack("<Q", len(c)))
            fh.write(np.ascontiguousarray(c, dtype="<f4").tobytes())
    else:
        Path(path).write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in c.tolist()))
