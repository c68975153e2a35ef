"""Hierarchical PointRWKV encoder/decoder, classification head and losses."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .embed import PatchEmbedding, PositionalEncoding
from .lgm import LGM, lgm_forward
from .mixing import ChannelMixing, ConfigError, SpatialMixing
from .numerics import Linear, LayerNorm, MLP, Module, Tensor, ops, parameter
from .pointops import PointCloud, ScalePyramid, apply_multiscale_mask, build_pyramid, knn, normalize


@dataclass
class ModelConfig:
    scale_sizes: tuple[int, ...] = (2048, 1024, 512)
    ks: tuple[int, ...] = (16, 8, 8)
    width: int = 64
    heads: int = 4
    encoder_blocks: tuple[int, ...] = (4, 4, 4)
    decoder_blocks: tuple[int, ...] = (2, 1, 1)  # coarse to fine
    mask_ratio: float = 0.8
    lgm_radius: tuple[float, ...] = (0.3, 0.3, 0.3)
    lgm_iterations: int = 3
    num_classes: int = 5
    hidden_ratio: int = 4
    d_lora: int = 0  # 0 selects max(width // 8, 8)
    pe_hidden: int = 128
    # ablation switches
    use_bqe: bool = True
    bidirectional: bool = True
    use_lgm: bool = True
    use_stabilizer: bool = True
    multiscale: bool = True
    bqe_mode: str = "literal"
    shift_mode: str = "grid"
    lgm_aggregate: str = "max"
    lgm_tied: bool = True
    fps_seed_index: int = 0

    def __post_init__(self):
        for name in ("scale_sizes", "ks", "encoder_blocks", "decoder_blocks", "lgm_radius"):
            setattr(self, name, tuple(getattr(self, name)))
        m = len(self.scale_sizes)
        if len(self.ks) != m:
            raise ConfigError(f"ks has {len(self.ks)} entries for {m} scales")
        if len(self.encoder_blocks) != m:
            raise ConfigError(f"encoder_blocks has {len(self.encoder_blocks)} entries for {m} scales")
        if len(self.decoder_blocks) != m:
            raise ConfigError(f"decoder_blocks has {len(self.decoder_blocks)} entries for {m} scales")
        if len(self.lgm_radius) != m:
            raise ConfigError(f"lgm_radius has {len(self.lgm_radius)} entries for {m} scales")
        if self.width % self.heads or self.width % 4:
            raise ConfigError(f"width {self.width} must be divisible by heads {self.heads} and by 4")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")

    @property
    def n_stages(self) -> int:
        return len(self.scale_sizes) if self.multiscale else 1

    @property
    def stage_sizes(self) -> tuple[int, ...]:
        return self.scale_sizes[: self.n_stages]

    @property
    def stage_blocks(self) -> tuple[int, ...]:
        return self.encoder_blocks if self.multiscale else (sum(self.encoder_blocks),)

    @property
    def encoder_depth(self) -> int:
        return sum(self.encoder_blocks)

    @property
    def decoder_depth(self) -> int:
        return sum(self.decoder_blocks)


# -- blocks ------------------------------------------------------------------------


class IFMBlock(Module):
    """Residual spatial mixing followed by residual channel mixing."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.width
        self.spatial = SpatialMixing(
            c, cfg.heads, rng, d_lora=cfg.d_lora or None, use_bqe=cfg.use_bqe,
            bidirectional=cfg.bidirectional, bqe_mode=cfg.bqe_mode, shift=cfg.shift_mode,
        )
        self.channel = ChannelMixing(
            c, rng, hidden_ratio=cfg.hidden_ratio, use_bqe=cfg.use_bqe, bqe_mode=cfg.bqe_mode,
            shift=cfg.shift_mode,
        )

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.spatial(x)
        return x + self.channel(x)


class PRWKVBlock(Module):
    """IFM and LGM branches in parallel, fused by a 2C -> C projection."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, radius: float):
        self.ifm = IFMBlock(cfg, rng)
        self.use_lgm = cfg.use_lgm
        if self.use_lgm:
            self.lgm = LGM(
                cfg.width, rng, radius=radius, iterations=cfg.lgm_iterations, tied=cfg.lgm_tied,
                aggregate=cfg.lgm_aggregate, stabilizer=cfg.use_stabilizer,
            )
            self.fuse = Linear(2 * cfg.width, cfg.width, rng)

    def forward(self, x: Tensor, anchors: np.ndarray, edges: np.ndarray | None = None) -> Tensor:
        """``x`` is (B, T, C) with anchors (B, T, 3); ``edges`` index the flattened B*T vertices."""
        ifm = self.ifm(x)
        if not self.use_lgm:
            return ifm
        b, t, c = x.shape
        flat_anchors = np.asarray(anchors).reshape(b * t, 3)
        if edges is None:
            edges = batched_edges(np.asarray(anchors).reshape(b, t, 3), self.lgm.radius)
        loc = ops.reshape(lgm_forward(flat_anchors, ops.reshape(x, (b * t, c)), self.lgm, edges), (b, t, c))
        return self.fuse(ops.concat([ifm, loc], axis=-1))


def prwkv_block(x: Tensor, anchors: np.ndarray, params: PRWKVBlock) -> Tensor:
    """Single-sequence convenience wrapper: ``x`` (T, C), ``anchors`` (T, 3)."""
    t, c = x.shape
    out = params(ops.reshape(x, (1, t, c)), np.asarray(anchors).reshape(1, t, 3))
    return ops.reshape(out, (t, c))


def batched_edges(anchors: np.ndarray, radius: float) -> np.ndarray:
    """Radius-graph edges of each sample, offset into one flattened vertex set."""
    from .pointops import radius_graph_celllist

    b, t, _ = anchors.shape
    parts = [radius_graph_celllist(anchors[i], radius).edges + i * t for i in range(b)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 2), dtype=np.intp)


# -- batching ----------------------------------------------------------------------


@dataclass
class StageInputs:
    visible: np.ndarray  # (B, T) indices of visible points within the level
    anchors: np.ndarray  # (B, T, 3)
    offsets: np.ndarray  # (B, T, k, 3)
    pool: np.ndarray | None  # (B, T, k) flat indices into the previous stage's B*T' tokens
    edges: np.ndarray | None = None


@dataclass
class Batch:
    pyramids: list[ScalePyramid]
    stages: list[StageInputs] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.pyramids)


def prepare_batch(pyramids: list[ScalePyramid], cfg: ModelConfig) -> Batch:
    """Stack per-stage encoder inputs; every sample must have equal visible counts per level."""
    batch = Batch(list(pyramids))
    prev_pos = None
    prev_t = 0
    for s in range(cfg.n_stages):
        vis = [np.flatnonzero(p.scales[s].visible) for p in pyramids]
        counts = {len(v) for v in vis}
        if len(counts) != 1:
            raise ValueError(f"samples disagree on visible count at level {s}: {sorted(counts)}")
        t = counts.pop()
        anchors = np.stack([p.scales[s].coords[v] for p, v in zip(pyramids, vis)])
        offsets = np.stack(
            [p.parent_coords(s)[p.scales[s].neighbors[v]] - p.scales[s].coords[v][:, None, :] for p, v in zip(pyramids, vis)]
        )
        pool = None
        if s > 0:
            rows = []
            for b, (p, v) in enumerate(zip(pyramids, vis)):
                tok = prev_pos[b][p.scales[s].neighbors[v]]
                if np.any(tok < 0):
                    raise ValueError(f"level {s} neighbor lists reach masked points of level {s - 1}")
                rows.append(tok + b * prev_t)
            pool = np.stack(rows)
        pos = []
        for p, v in zip(pyramids, vis):
            m = np.full(p.scales[s].size, -1, dtype=np.intp)
            m[v] = np.arange(len(v))
            pos.append(m)
        edges = batched_edges(anchors, cfg.lgm_radius[s]) if cfg.use_lgm else None
        batch.stages.append(StageInputs(np.stack(vis), anchors, offsets, pool, edges))
        prev_pos, prev_t = pos, t
    return batch


def collate(samples: list[Batch], scales=None, shifts=None) -> Batch:
    """Stack single-sample batches, optionally scaling and translating each sample.

    Radius-graph edges are carried over from each sample's own batch, so the
    graph stays the one built on the untransformed coordinates. With no
    transform the result equals ``prepare_batch`` on the same pyramids.
    """
    if any(s.size != 1 for s in samples):
        raise ValueError("collate expects single-sample batches")
    n = len(samples)
    scales = np.ones(n) if scales is None else np.asarray(scales, dtype=np.float64)
    shifts = np.zeros((n, 3)) if shifts is None else np.asarray(shifts, dtype=np.float64)
    out = Batch([p for s in samples for p in s.pyramids])
    for k in range(len(samples[0].stages)):
        parts = [s.stages[k] for s in samples]
        t = {p.visible.shape[1] for p in parts}
        if len(t) != 1:
            raise ValueError(f"samples disagree on visible count at level {k}: {sorted(t)}")
        t = t.pop()
        anchors = np.concatenate([p.anchors * a + d for p, a, d in zip(parts, scales, shifts)])
        offsets = np.concatenate([p.offsets * a for p, a in zip(parts, scales)])
        pool = None
        if parts[0].pool is not None:
            prev_t = samples[0].stages[k - 1].visible.shape[1]
            pool = np.concatenate([p.pool + b * prev_t for b, p in enumerate(parts)])
        edges = None
        if parts[0].edges is not None:
            edges = np.concatenate([p.edges + b * t for b, p in enumerate(parts)])
        out.stages.append(StageInputs(np.concatenate([p.visible for p in parts]), anchors, offsets, pool, edges))
    if not (np.all(scales == 1.0) and not np.any(shifts)):
        out.pyramids = [
            ScalePyramid([replace(sc, coords=sc.coords * a + d) for sc in p.scales])
            for p, a, d in zip(out.pyramids, scales, shifts)
        ]
    return out


def make_pyramid(pc, cfg: ModelConfig, ratio: float = 0.0, mask_seed: int = 0) -> ScalePyramid:
    """Pyramid over the normalized cloud, masked at ``ratio``."""
    coords = normalize(pc).coords
    pyr = build_pyramid(coords, cfg.stage_sizes, cfg.ks[: cfg.n_stages], seed_index=cfg.fps_seed_index)
    return apply_multiscale_mask(pyr, ratio, mask_seed)


# -- encoder / decoder -------------------------------------------------------------


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embeds = [PatchEmbedding(cfg.width, rng, pe_hidden=cfg.pe_hidden) for _ in range(cfg.n_stages)]
        self.stages = [
            [PRWKVBlock(cfg, rng, cfg.lgm_radius[s]) for _ in range(n)]
            for s, n in enumerate(cfg.stage_blocks)
        ]

    def forward(self, batch: Batch) -> list[Tensor]:
        """Per-stage outputs (B, T_s, C), fine to coarse; each is retained as a skip."""
        outs: list[Tensor] = []
        x = None
        for s, (emb, blocks) in enumerate(zip(self.embeds, self.stages)):
            st = batch.stages[s]
            h = emb(st.offsets, st.anchors)
            if s > 0:
                b, t, c = x.shape
                pooled = ops.max(ops.take(ops.reshape(x, (b * t, c)), st.pool), axis=-2)
                h = h + pooled
            x = h
            for blk in blocks:
                x = blk(x, st.anchors, st.edges)
            outs.append(x)
        return outs


def encoder_forward(pyr: ScalePyramid, params: Encoder) -> list[Tensor]:
    return params(prepare_batch([pyr], params.cfg))


class Decoder(Module):
    """Coarse-to-fine IFM decoder over visible and mask tokens, predicting masked patches."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.width
        n = cfg.n_stages
        depths = cfg.decoder_blocks if cfg.multiscale else (sum(cfg.decoder_blocks),)
        self.mask_token = parameter(rng.normal(0.0, 0.02, size=c))
        self.pos = PositionalEncoding(c, rng, hidden=cfg.pe_hidden)
        self.skip = [Linear(c, c, rng) for _ in range(n)]
        # stages[j] decodes level n-1-j
        self.stages = [[IFMBlock(cfg, rng) for _ in range(depths[j])] for j in range(n)]
        self.norm = LayerNorm(c)
        self.heads = [Linear(c, 3 * cfg.ks[s], rng) for s in range(n)]

    def forward(self, skips: list[Tensor], batch: Batch) -> dict[int, tuple[Tensor, np.ndarray]]:
        """Map level -> (predicted offsets (M, k, 3), target offsets (M, k, 3)) over masked points."""
        cfg = self.cfg
        c = cfg.width
        n = cfg.n_stages
        pyrs = batch.pyramids
        b = batch.size
        out: dict[int, tuple[Tensor, np.ndarray]] = {}
        prev = None
        prev_size = 0
        for j in range(n):
            s = n - 1 - j
            size = pyrs[0].scales[s].size
            vis = batch.stages[s].visible
            hidden = [np.flatnonzero(~p.scales[s].visible) for p in pyrs]
            if len({len(m) for m in hidden}) != 1:
                raise ValueError(f"samples disagree on masked count at level {s}")
            tv, tm = vis.shape[1], len(hidden[0])
            vis_tok = ops.reshape(self.skip[s](skips[s]), (b * tv, c))
            parts = [vis_tok]
            if tm:
                parts.append(ops.take(ops.reshape(self.mask_token, (1, c)), np.zeros(b * tm, dtype=np.intp)))
            pool = ops.concat(parts, axis=0) if len(parts) > 1 else vis_tok
            # slot of every level point in [visible tokens..., mask tokens...]
            order = np.empty((b, size), dtype=np.intp)
            for i in range(b):
                order[i, vis[i]] = i * tv + np.arange(tv)
                order[i, hidden[i]] = b * tv + i * tm + np.arange(tm)
            x = ops.take(pool, order)
            coords = np.stack([p.scales[s].coords for p in pyrs])
            x = x + self.pos(Tensor(coords))
            if prev is not None:
                up = np.stack(
                    [knn(p.scales[s].coords, p.scales[s + 1].coords, 1)[:, 0] + i * prev_size for i, p in enumerate(pyrs)]
                )
                x = x + ops.take(ops.reshape(prev, (b * prev_size, c)), up)
            for blk in self.stages[j]:
                x = blk(x)
            prev, prev_size = x, size
            if tm:
                rows = np.concatenate([i * size + hidden[i] for i in range(b)])
                flat = ops.reshape(self.norm(x), (b * size, c))
                pred = ops.reshape(self.heads[s](ops.take(flat, rows)), (b * tm, cfg.ks[s], 3))
                target = np.concatenate(
                    [p.parent_coords(s)[p.scales[s].neighbors[h]] - p.scales[s].coords[h][:, None, :] for p, h in zip(pyrs, hidden)]
                )
                out[s] = (pred, target)
        return out


def decoder_forward(skips: list[Tensor], batch: Batch, params: Decoder):
    return params(skips, batch)


def chamfer_loss(pred, target) -> Tensor:
    """Symmetric Chamfer distance between (k, 3) sets on squared norms."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape[0] == 0 or target.shape[0] == 0:
        raise ValueError("chamfer_loss: empty point set")
    p = ops.reshape(pred, (1,) + pred.shape)
    t = ops.reshape(target, (1,) + target.shape)
    return ops.chamfer_distance(p, t)


# -- full model ----------------------------------------------------------------------


class PointRWKV(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.cls_norm = LayerNorm(cfg.width)
        self.cls_head = MLP([2 * cfg.width, cfg.width, cfg.num_classes], rng)

    def reconstruction_loss(self, batch: Batch) -> Tensor:
        preds = self.decoder(self.encoder(batch), batch)
        if not preds:
            raise ValueError("no masked points to reconstruct")
        losses = [ops.chamfer_distance(p, Tensor(t, dtype=p.data.dtype)) for p, t in preds.values()]
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        return total / len(losses)

    def logits(self, batch: Batch) -> Tensor:
        x = self.cls_norm(self.encoder(batch)[-1])
        feat = ops.concat([ops.mean(x, axis=1), ops.max(x, axis=1)], axis=-1)
        return self.cls_head(feat)


def classify_forward(pc: PointCloud, params: PointRWKV) -> Tensor:
    """Class logits (K,) for one cloud, encoded without masking."""
    pyr = make_pyramid(pc, params.cfg)
    return ops.reshape(params.logits(prepare_batch([pyr], params.cfg)), (params.cfg.num_classes,))
