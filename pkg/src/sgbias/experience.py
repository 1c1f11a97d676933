"""Experience estimation: a relation distribution predicted from label pairs.

Subject and object categories are embedded with separate weight matrices
(the roles matter: the same category has different predicate statistics as
subject and as object), combined with a geometry embedding of the two boxes,
and mapped by a two-layer perceptron to an unnormalized score vector over
predicates. Training pulls that vector toward the product of the subject
and object marginal rows under a cosine objective, which is deliberately
scale-invariant, so no output softmax is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import ParamStore


@dataclass(frozen=True)
class ExperienceConfig:
    n_objects: int
    n_predicates: int
    embed_dim: int = 16    # reference-scale runs use 200-dim pretrained vectors
    proj_dim: int = 64     # reference scale: 1024
    hidden_dim: int = 256  # reference scale: 4096

    def __post_init__(self):
        if min(self.embed_dim, self.proj_dim, self.hidden_dim) < 1:
            raise ValueError("experience dims must be positive")


PREFIX = "eem."


def init_params(store: ParamStore, cfg: ExperienceConfig, rng: np.random.Generator):
    def dense(name, nin, nout, zero_bias=True):
        store.create(PREFIX + name + ".w", rng.normal(0, 1 / np.sqrt(nin), (nin, nout)))
        store.create(PREFIX + name + ".b", np.zeros(nout))

    store.create(PREFIX + "w_s",
                 rng.normal(0, 1 / np.sqrt(cfg.embed_dim),
                            (cfg.n_objects, cfg.embed_dim)))
    store.create(PREFIX + "w_o",
                 rng.normal(0, 1 / np.sqrt(cfg.embed_dim),
                            (cfg.n_objects, cfg.embed_dim)))
    dense("phi_s", cfg.embed_dim, cfg.proj_dim)
    dense("phi_o", cfg.embed_dim, cfg.proj_dim)
    dense("phi_p", 8, cfg.proj_dim)
    dense("head1", 3 * cfg.proj_dim, cfg.hidden_dim)
    store.create(PREFIX + "head2.w",
                 rng.normal(0, 1 / np.sqrt(cfg.hidden_dim),
                            (cfg.hidden_dim, cfg.n_predicates)))
    # positive output bias keeps early score vectors away from the cosine
    # objective's ill-conditioned neighborhood of zero
    store.create(PREFIX + "head2.b", np.full(cfg.n_predicates, 0.2))


def embedding_names(shared: bool = True):
    return (PREFIX + "w_s", PREFIX + "w_o")


def pair_geometry(box_i, box_j) -> np.ndarray:
    """The 8-vector of both boxes' normalized coordinates."""
    return np.concatenate([box_i.as_array(), box_j.as_array()])


def position_embed_batch(geometry: np.ndarray, store: ParamStore) -> ad.Tensor:
    """Geometry rows (B × 8) through the position projection layer."""
    x = ad.constant(geometry)
    return ad.relu(ad.affine(x, store[PREFIX + "phi_p.w"], store[PREFIX + "phi_p.b"]))


def position_embed(box_i, box_j, store: ParamStore) -> ad.Tensor:
    """Embedding of one box pair as a vector."""
    out = position_embed_batch(pair_geometry(box_i, box_j)[None], store)
    return ad.reshape(out, (out.shape[1],))


def estimate_batch(subjects, objects, pos: ad.Tensor, store: ParamStore) -> ad.Tensor:
    """Score vectors (B × N_r) for category id arrays plus position rows."""
    es = ad.gather_rows(store[PREFIX + "w_s"], subjects)
    eo = ad.gather_rows(store[PREFIX + "w_o"], objects)
    fs = ad.relu(ad.affine(es, store[PREFIX + "phi_s.w"], store[PREFIX + "phi_s.b"]))
    fo = ad.relu(ad.affine(eo, store[PREFIX + "phi_o.w"], store[PREFIX + "phi_o.b"]))
    h = ad.concat([fs, fo, pos], axis=1)
    h = ad.relu(ad.affine(h, store[PREFIX + "head1.w"], store[PREFIX + "head1.b"]))
    return ad.affine(h, store[PREFIX + "head2.w"], store[PREFIX + "head2.b"])


def estimate(c_i: int, c_j: int, p_ij: ad.Tensor, store: ParamStore) -> ad.Tensor:
    """Relation score vector for one labeled pair; raw, no squashing."""
    pos = ad.reshape(p_ij, (1, p_ij.shape[-1]))
    out = estimate_batch([c_i], [c_j], pos, store)
    return ad.reshape(out, (out.shape[1],))


def est_loss(scores: ad.Tensor, targets) -> ad.Tensor:
    """Sum over the batch of 1 − cosine(score row, target row)."""
    t = targets if isinstance(targets, ad.Tensor) else ad.constant(targets)
    cos = ad.cosine_similarity(scores, t)
    batch = 1 if scores.data.ndim == 1 else scores.shape[0]
    return ad.sub(ad.constant(float(batch)), ad.sum(cos))


def mean_cosine(store: ParamStore, pairs, geometry, targets) -> float:
    """Held-out diagnostic: average cosine between estimates and targets."""
    subs = [s for s, _ in pairs]
    objs = [o for _, o in pairs]
    with ad.no_grad():
        pos = position_embed_batch(geometry, store)
        d = estimate_batch(subs, objs, pos, store)
        cos = ad.cosine_similarity(d, ad.constant(targets))
    return float(cos.data.mean())


def fit_marginal_targets(store: ParamStore, pairs, geometry, targets, *,
                         epochs: int = 50, lr: float = 0.5, batch_size: int = 64,
                         seed: int = 0):
    """Fit the estimator to marginal-product targets with minibatch SGD.

    ``pairs`` is a sequence of (subject category, object category); geometry
    rows and target rows are aligned with it. Returns the per-epoch mean of
    the summed cosine loss.
    """
    subs = np.array([s for s, _ in pairs])
    objs = np.array([o for _, o in pairs])
    geometry = np.asarray(geometry, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    tensors = [store[name] for name in store.names() if name.startswith(PREFIX)]
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(subs))
        total = 0.0
        for lo in range(0, len(order), batch_size):
            sel = order[lo:lo + batch_size]
            pos = position_embed_batch(geometry[sel], store)
            d = estimate_batch(subs[sel], objs[sel], pos, store)
            loss = ad.scale(est_loss(d, targets[sel]), 1.0 / len(sel))
            ad.backward(loss)
            ad.sgd_step(tensors, lr)
            total += loss.item() * len(sel)
        history.append(total / len(subs))
    return history
