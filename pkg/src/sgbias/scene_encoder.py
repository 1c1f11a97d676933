"""Scene encoding: self-attention over all label+position tokens of a scene.

Each entity contributes one token built from its label embedding and a
projection of its box coordinates; no visual features enter. Stacked
multi-head self-attention blocks mix the tokens, and the resulting scene
representation is concatenated onto each node feature. Tokens carry no
sequence-order signal, so the encoder is permutation-equivariant by
construction: order information can only enter through the boxes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import EmptySceneError
from .params import ParamStore


@dataclass(frozen=True)
class SceneEncoderConfig:
    n_objects: int
    embed_dim: int = 16
    pos_dim: int = 8
    layers: int = 2        # reference scale: 4
    heads: int = 4         # reference scale: 8
    model_dim: int = 32
    ffn_dim: int = 64
    out_dim: int = 32      # reference scale: 512
    attention_residual: bool = False  # extension knob; default follows Eq. form

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )
        if min(self.layers, self.heads, self.model_dim, self.out_dim) < 1:
            raise ValueError("encoder dims must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


PREFIX = "sem."


def init_params(store: ParamStore, cfg: SceneEncoderConfig, rng: np.random.Generator):
    def dense(name, nin, nout):
        store.create(PREFIX + name + ".w", rng.normal(0, 1 / np.sqrt(nin), (nin, nout)))
        store.create(PREFIX + name + ".b", np.zeros(nout))

    store.create(PREFIX + "w_c",
                 rng.normal(0, 1 / np.sqrt(cfg.embed_dim),
                            (cfg.n_objects, cfg.embed_dim)))
    dense("pos", 4, cfg.pos_dim)
    dense("in_proj", cfg.embed_dim + cfg.pos_dim, cfg.model_dim)
    dk = cfg.head_dim
    for layer in range(cfg.layers):
        base = f"layer{layer}."
        for head in range(cfg.heads):
            hb = base + f"head{head}."
            scale = 1 / np.sqrt(cfg.model_dim)
            for mat in ("wq", "wk", "wv"):
                store.create(PREFIX + hb + mat,
                             rng.normal(0, scale, (cfg.model_dim, dk)))
        dense(base + "merge", cfg.model_dim, cfg.model_dim)
        dense(base + "ffn1", cfg.model_dim, cfg.ffn_dim)
        dense(base + "ffn2", cfg.ffn_dim, cfg.model_dim)
        store.create(PREFIX + base + "ln.gain", np.ones(cfg.model_dim))
        store.create(PREFIX + base + "ln.bias", np.zeros(cfg.model_dim))
    dense("out", cfg.model_dim, cfg.out_dim)


def pack_input(labels, boxes, store: ParamStore, cfg: SceneEncoderConfig) -> ad.Tensor:
    """Token matrix (n × model_dim) from entity labels and boxes."""
    if len(labels) == 0:
        raise EmptySceneError("pack_input: scene has no entities")
    if len(labels) != len(boxes):
        raise ad.ShapeError(
            f"pack_input: {len(labels)} labels vs {len(boxes)} boxes"
        )
    emb = ad.gather_rows(store[PREFIX + "w_c"], labels)
    coords = ad.constant(np.stack([b.as_array() for b in boxes]))
    pos = ad.relu(ad.affine(coords, store[PREFIX + "pos.w"], store[PREFIX + "pos.b"]))
    tokens = ad.concat([emb, pos], axis=1)
    return ad.affine(tokens, store[PREFIX + "in_proj.w"], store[PREFIX + "in_proj.b"])


def attention_layer(x: ad.Tensor, store: ParamStore, layer: int,
                    cfg: SceneEncoderConfig, return_weights: bool = False):
    """One multi-head self-attention pass, heads merged by an affine map."""
    base = PREFIX + f"layer{layer}."
    inv_sqrt_dk = 1.0 / np.sqrt(cfg.head_dim)
    heads, weights = [], []
    for head in range(cfg.heads):
        hb = base + f"head{head}."
        q = ad.matmul(x, store[hb + "wq"])
        k = ad.matmul(x, store[hb + "wk"])
        v = ad.matmul(x, store[hb + "wv"])
        attn = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt_dk),
                          axis=-1)
        heads.append(ad.matmul(attn, v))
        weights.append(attn)
    merged = ad.affine(ad.concat(heads, axis=1),
                       store[base + "merge.w"], store[base + "merge.b"])
    return (merged, weights) if return_weights else merged


def _ffn(x: ad.Tensor, store: ParamStore, base: str) -> ad.Tensor:
    h = ad.relu(ad.affine(x, store[base + "ffn1.w"], store[base + "ffn1.b"]))
    return ad.affine(h, store[base + "ffn2.w"], store[base + "ffn2.b"])


def scene_encode(tokens: ad.Tensor, store: ParamStore,
                 cfg: SceneEncoderConfig) -> ad.Tensor:
    """Scene representation (n × out_dim) from packed tokens."""
    x = tokens
    for layer in range(cfg.layers):
        base = PREFIX + f"layer{layer}."
        attended = attention_layer(x, store, layer, cfg)
        if cfg.attention_residual:
            attended = ad.add(attended, x)
        x = ad.layer_norm(ad.add(attended, _ffn(attended, store, base)),
                          store[base + "ln.gain"], store[base + "ln.bias"])
    return ad.affine(x, store[PREFIX + "out.w"], store[PREFIX + "out.b"])


def node_update(scene_reps: ad.Tensor, node_features: ad.Tensor) -> ad.Tensor:
    """Concatenate each entity's scene representation onto its node feature."""
    if scene_reps.shape[0] != node_features.shape[0]:
        raise ad.ShapeError(
            f"node_update: {scene_reps.shape[0]} scene rows vs "
            f"{node_features.shape[0]} node rows"
        )
    return ad.concat([scene_reps, node_features], axis=1)
