"""Whole-model finite-difference check on a tiny configuration."""

from __future__ import annotations

import numpy as np

from ..harness.data import gen_shape
from ..model import ModelConfig, PointRWKV, make_pyramid, prepare_batch
from ..numerics import fd_check_directional, fd_check_many, ops, precision


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        scale_sizes=(64, 32, 16), ks=(4, 4, 4), width=8, heads=2, encoder_blocks=(1, 1, 1),
        decoder_blocks=(1, 1, 1), lgm_radius=(0.6, 0.7, 0.8), num_classes=3, hidden_ratio=2,
        pe_hidden=8, mask_ratio=0.5,
    )
    base.update(overrides)
    return ModelConfig(**base)


def model_gradcheck(
    seed: int = 0,
    max_coords: int | None = 3,
    h: float = 1e-5,
    cfg: ModelConfig | None = None,
    directional: bool = False,
    refine: int = 3,
) -> dict[str, float]:
    """Relative FD error of every parameter tensor under reconstruction + classification loss.

    Parameters are jittered first so that zero-initialized projections do not
    hide the gradients flowing through them. At most ``max_coords``
    coordinates per tensor are sampled; with ``directional`` each tensor is
    instead probed along one random direction covering all its coordinates.
    Max pooling and the Chamfer nearest-neighbour choice make the loss only
    piecewise smooth, so the step is refined up to ``refine`` times.
    """
    cfg = cfg if cfg is not None else tiny_config()
    rng = np.random.default_rng(seed)
    with precision(64):
        model = PointRWKV(cfg, seed=seed)
        for p in model.parameters():
            p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)
        n = cfg.scale_sizes[0]
        clouds = [gen_shape(kind, n, seed + i, jitter=0.01) for i, kind in enumerate(("sphere", "torus"))]
        masked = prepare_batch([make_pyramid(clouds[0], cfg, ratio=cfg.mask_ratio, mask_seed=seed)], cfg)
        full = prepare_batch([make_pyramid(c, cfg) for c in clouds], cfg)
        labels = np.array([0, 2])

        def loss():
            return model.reconstruction_loss(masked) + ops.cross_entropy(model.logits(full), labels)

        params = list(model.named_parameters())
        if directional:
            return fd_check_directional(loss, params, h=h, rng=rng, refine=refine)
        return fd_check_many(loss, params, h=h, max_coords=max_coords, rng=rng, refine=refine)
