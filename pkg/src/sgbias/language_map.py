"""Language map: label-pair outer products turned into channel-wise edge bias.

The outer product of the subject and object embeddings is a rank-1 map that
carries their correlation structure. It is average-pooled to a fixed spatial
size, pushed through two small relu-terminated convolutions, and globally
pooled into one attention value per edge channel. That C×1×1 vector is
broadcast over the edge feature grid and added as a bias. The final
convolution starts at zero so an untrained module is an exact no-op on
edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import experience
from .params import ParamStore


@dataclass(frozen=True)
class LanguageMapConfig:
    channels: int = 8      # reference scale: 256
    pool_size: int = 4
    embed_dim: int = 16
    share_embeddings: bool = True

    def __post_init__(self):
        if self.channels < 2 or self.channels % 2:
            raise ValueError(f"channels must be even and >= 2, got {self.channels}")
        if self.pool_size < 1:
            raise ValueError("pool_size must be positive")


PREFIX = "lmm."


def init_params(store: ParamStore, cfg: LanguageMapConfig,
                rng: np.random.Generator, n_objects: int | None = None):
    half = cfg.channels // 2
    store.create(PREFIX + "conv1.w", rng.normal(0, 1 / 3.0, (half, 1, 3, 3)))
    store.create(PREFIX + "conv1.b", np.zeros(half))
    # zero init: the module contributes nothing until training moves it
    store.create(PREFIX + "conv2.w", np.zeros((cfg.channels, half, 3, 3)))
    store.create(PREFIX + "conv2.b", np.zeros(cfg.channels))
    if not cfg.share_embeddings:
        if n_objects is None:
            raise ValueError("unshared embeddings need the object category count")
        scale = 1 / np.sqrt(cfg.embed_dim)
        store.create(PREFIX + "w_s", rng.normal(0, scale, (n_objects, cfg.embed_dim)))
        store.create(PREFIX + "w_o", rng.normal(0, scale, (n_objects, cfg.embed_dim)))


def _embeddings(store: ParamStore, cfg: LanguageMapConfig):
    if cfg.share_embeddings:
        return store[experience.PREFIX + "w_s"], store[experience.PREFIX + "w_o"]
    return store[PREFIX + "w_s"], store[PREFIX + "w_o"]


def language_maps(subjects, objects, store: ParamStore,
                  cfg: LanguageMapConfig) -> ad.Tensor:
    """Outer-product maps (B × 1 × D_w × D_w) for category id arrays."""
    w_s, w_o = _embeddings(store, cfg)
    es = ad.gather_rows(w_s, subjects)
    eo = ad.gather_rows(w_o, objects)
    b, d = es.shape
    outer = ad.mul(ad.reshape(es, (b, d, 1)), ad.reshape(eo, (b, 1, d)))
    return ad.reshape(outer, (b, 1, d, d))


def language_map(c_i: int, c_j: int, store: ParamStore,
                 cfg: LanguageMapConfig) -> ad.Tensor:
    """Rank-1 correlation map (1 × D_w × D_w) of one label pair."""
    out = language_maps([c_i], [c_j], store, cfg)
    return ad.reshape(out, out.shape[1:])


def channel_attention(x_map: ad.Tensor, store: ParamStore,
                      cfg: LanguageMapConfig) -> ad.Tensor:
    """Per-channel attention (… × C × 1 × 1), nonnegative by construction."""
    spatial = x_map.shape[-1]
    if x_map.shape[-2] != spatial:
        raise ad.ShapeError(f"channel_attention: map must be square, got {x_map.shape}")
    s = cfg.pool_size
    if spatial % s:
        raise ad.ShapeError(
            f"channel_attention: pool size {s} does not tile a {spatial}-wide map"
        )
    h = x_map if spatial == s else ad.pool2d(x_map, "avg", kernel=spatial // s)
    half = cfg.channels // 2
    b1 = ad.reshape(store[PREFIX + "conv1.b"], (half, 1, 1))
    h = ad.relu(ad.add(ad.conv2d(h, store[PREFIX + "conv1.w"], padding=1), b1))
    b2 = ad.reshape(store[PREFIX + "conv2.b"], (cfg.channels, 1, 1))
    h = ad.relu(ad.add(ad.conv2d(h, store[PREFIX + "conv2.w"], padding=1), b2))
    return ad.pool2d(h, "global_avg")


def apply_edge_bias(e_ij: ad.Tensor, f_lm: ad.Tensor) -> ad.Tensor:
    """Broadcast the channel attention over the edge grid and add it.

    Upsampling a 1×1 map to the edge's spatial size degenerates to a
    broadcast, so the bias is spatially constant per channel.
    """
    if e_ij.shape[-3] != f_lm.shape[-3]:
        raise ad.ShapeError(
            f"apply_edge_bias: channel mismatch, edge {e_ij.shape} "
            f"vs attention {f_lm.shape}"
        )
    return ad.add(e_ij, f_lm)
