"""Full model assembly: feature updates, baseline predictor, fusion, training.

The baseline predictor is deliberately minimal — a perceptron over the two
updated node features plus the pooled updated edge feature — because the
bias modules only contract on the (nodes, edges) interface, not on any
particular backbone. Each paradigm is behind a toggle:

* scene encoding updates node features (off: nodes are zero-padded to the
  same width, so the classifier shape never changes);
* the language map biases edge features before pooling;
* the experience estimate is added to the classifier logits before softmax,
  the same slot a log-frequency prior can occupy instead.

With every toggle off the pipeline is bit-identical to the bare baseline.
Training is plain fixed-rate SGD, single-threaded, fully seeded.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import experience, language_map, metrics, scene_encoder
from .corpus import StatsTables, freq_table, joint_target
from .errors import DataError, DivergenceError
from .params import ParamStore


@dataclass(frozen=True)
class ModelConfig:
    n_objects: int
    n_predicates: int
    node_dim: int
    edge_channels: int
    edge_size: int
    eem: experience.ExperienceConfig
    lmm: language_map.LanguageMapConfig
    sem: scene_encoder.SceneEncoderConfig
    baseline_hidden: int = 64

    @property
    def padded_node_dim(self) -> int:
        return self.sem.out_dim + self.node_dim

    @property
    def classifier_in(self) -> int:
        return 2 * self.padded_node_dim + self.edge_channels


@dataclass(frozen=True)
class PipelineConfig:
    use_eem: bool = True
    use_lmm: bool = True
    use_sem: bool = True
    use_freq_baseline: bool = False
    lambda_est: float = 1.0
    eem_stop_gradient: bool = False
    freeze_embeddings: bool = False
    lr: float = 0.2
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lambda_est < 0:
            raise ValueError(f"lambda_est must be >= 0, got {self.lambda_est}")
        if self.use_eem and self.use_freq_baseline:
            raise ValueError("at most one of eem / freq prior may contribute")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad training hyperparameters")


def init_model(cfg: ModelConfig, seed: int) -> ParamStore:
    """Fresh parameters for every module; toggles only affect usage."""
    def rng(k):
        return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))

    store = ParamStore()
    experience.init_params(store, cfg.eem, rng(0))
    language_map.init_params(store, cfg.lmm, rng(1), n_objects=cfg.n_objects)
    scene_encoder.init_params(store, cfg.sem, rng(2))
    h = cfg.baseline_hidden
    r = rng(3)
    store.create("base.cls1.w", r.normal(0, 1 / np.sqrt(cfg.classifier_in),
                                         (cfg.classifier_in, h)))
    store.create("base.cls1.b", np.zeros(h))
    store.create("base.cls2.w", r.normal(0, 1 / np.sqrt(h), (h, cfg.n_predicates)))
    store.create("base.cls2.b", np.zeros(cfg.n_predicates))
    return store


@dataclass
class RunContext:
    """Everything a forward pass needs besides the scene itself."""

    store: ParamStore
    model: ModelConfig
    pipe: PipelineConfig
    stats: StatsTables | None = None
    _freq_logp: np.ndarray | None = None

    def freq_logp(self) -> np.ndarray:
        if self._freq_logp is None:
            if self.stats is None:
                raise DataError("frequency prior requested but no stats provided")
            self._freq_logp = np.log(freq_table(self.stats))
        return self._freq_logp

    def est_targets(self, s_cats, o_cats) -> np.ndarray:
        if self.stats is None:
            raise DataError("experience targets requested but no stats provided")
        return np.stack([joint_target(s, o, self.stats)
                         for s, o in zip(s_cats, o_cats)])


def _updated_nodes(scene, ctx: RunContext) -> ad.Tensor:
    node_t = ad.constant(scene.node_features)
    if ctx.pipe.use_sem:
        tokens = scene_encoder.pack_input(scene.categories, scene.boxes,
                                          ctx.store, ctx.model.sem)
        reps = scene_encoder.scene_encode(tokens, ctx.store, ctx.model.sem)
        return scene_encoder.node_update(reps, node_t)
    pad = ad.constant(np.zeros((scene.n_entities, ctx.model.sem.out_dim)))
    return ad.concat([pad, node_t], axis=1)


def forward_scene(scene, ctx: RunContext, pairs=None):
    """Fused relation logits for the given ordered pairs of one scene.

    Returns (pairs, logits, estimate) where estimate is the experience
    score tensor when that paradigm is on, else None. Logit-space fusion:
    estimates (or the log-frequency prior) are added before any softmax.
    """
    if pairs is None:
        pairs = scene.ordered_pairs()
    pairs = list(pairs)
    if not pairs:
        return pairs, None, None
    for pq in pairs:
        if pq not in scene.edge_features:
            raise DataError(
                f"scene {scene.scene_id}: missing edge feature for pair {pq}"
            )

    nhat = _updated_nodes(scene, ctx)
    edges = ad.constant(np.stack([scene.edge_features[pq] for pq in pairs]))
    s_idx = [i for i, _ in pairs]
    o_idx = [j for _, j in pairs]
    s_cats = [scene.categories[i] for i in s_idx]
    o_cats = [scene.categories[j] for j in o_idx]

    if ctx.pipe.use_lmm:
        maps = language_map.language_maps(s_cats, o_cats, ctx.store, ctx.model.lmm)
        attn = language_map.channel_attention(maps, ctx.store, ctx.model.lmm)
        edges = language_map.apply_edge_bias(edges, attn)
    pooled = ad.reshape(ad.pool2d(edges, "global_avg"),
                        (len(pairs), ctx.model.edge_channels))

    x = ad.concat([ad.gather_rows(nhat, s_idx), ad.gather_rows(nhat, o_idx),
                   pooled], axis=1)
    h = ad.relu(ad.affine(x, ctx.store["base.cls1.w"], ctx.store["base.cls1.b"]))
    logits = ad.affine(h, ctx.store["base.cls2.w"], ctx.store["base.cls2.b"])

    estimate = None
    if ctx.pipe.use_eem:
        geometry = np.stack([
            experience.pair_geometry(scene.boxes[i], scene.boxes[j])
            for i, j in pairs
        ])
        pos = experience.position_embed_batch(geometry, ctx.store)
        estimate = experience.estimate_batch(s_cats, o_cats, pos, ctx.store)
        fused = estimate.detach() if ctx.pipe.eem_stop_gradient else estimate
        logits = ad.add(logits, fused)
    elif ctx.pipe.use_freq_baseline:
        prior = ctx.freq_logp()[s_cats, o_cats]
        logits = ad.add(logits, ad.constant(prior))
    return pairs, logits, estimate


def score_scene(scene, ctx: RunContext) -> metrics.RelationScores:
    """All-pairs inference producing plain arrays for the evaluation kit."""
    with ad.no_grad():
        pairs, logits, _ = forward_scene(scene, ctx)
    data = logits.data.copy() if logits is not None else \
        np.zeros((0, ctx.model.n_predicates))
    return metrics.RelationScores(scene.scene_id, tuple(pairs), data)


def sample_training_pairs(scene, rng: np.random.Generator):
    """Annotated pairs plus an equal number of background-labeled negatives."""
    annotated = sorted({(s, o) for s, o, _ in scene.triplets})
    label = {}
    for s, o, p in scene.triplets:
        label.setdefault((s, o), p)  # one predicate per pair enters the CE term
    candidates = [pq for pq in scene.ordered_pairs() if pq not in label]
    n_neg = min(len(annotated), len(candidates))
    negatives = []
    if n_neg:
        chosen = rng.choice(len(candidates), size=n_neg, replace=False)
        negatives = [candidates[int(c)] for c in sorted(chosen)]
    pairs = annotated + negatives
    targets = np.array([label.get(pq, 0) for pq in pairs], dtype=np.intp)
    return pairs, targets


def batch_loss(scenes, ctx: RunContext, rng: np.random.Generator) -> ad.Tensor:
    """Mean cross-entropy over sampled pairs plus the weighted mean cosine
    mismatch of the experience estimates against their marginal targets."""
    ce_parts, est_parts, est_targets = [], [], []
    for scene in scenes:
        if scene.n_entities < 2:
            continue
        pairs, targets = sample_training_pairs(scene, rng)
        pairs, logits, estimate = forward_scene(scene, ctx, pairs)
        if logits is None:
            continue
        ce_parts.append(ad.cross_entropy(logits, targets))
        if estimate is not None:
            est_parts.append(estimate)
            est_targets.append(ctx.est_targets(
                [scene.categories[i] for i, _ in pairs],
                [scene.categories[j] for _, j in pairs]))
    if not ce_parts:
        raise DataError("batch contains no scorable pairs")
    loss = ad.mean(ad.concat(ce_parts))
    if est_parts and ctx.pipe.lambda_est > 0:
        d = ad.concat(est_parts, axis=0)
        est = experience.est_loss(d, np.concatenate(est_targets, axis=0))
        loss = ad.add(loss, ad.scale(est, ctx.pipe.lambda_est / d.shape[0]))
    return loss


def trainable_tensors(ctx: RunContext):
    frozen = set(experience.embedding_names()) if ctx.pipe.freeze_embeddings else set()
    return [t for name, t in ctx.store.items() if name not in frozen]


def train(train_scenes, val_scenes, ctx: RunContext):
    """Epochs of minibatch SGD; returns one record per epoch.

    Deterministic given the pipeline seed: scene order, negative sampling
    and every update depend only on (seed, epoch, position). Aborts with
    DivergenceError on a non-finite loss.
    """
    if not train_scenes:
        raise DataError("train: empty dataset")
    pcfg = ctx.pipe
    tensors = trainable_tensors(ctx)
    history = []
    for epoch in range(pcfg.epochs):
        order_rng = np.random.default_rng([pcfg.seed, 7, epoch])
        order = order_rng.permutation(len(train_scenes))
        losses = []
        for b, lo in enumerate(range(0, len(order), pcfg.batch_size)):
            batch = [train_scenes[i] for i in order[lo:lo + pcfg.batch_size]]
            neg_rng = np.random.default_rng([pcfg.seed, 11, epoch, b])
            loss = batch_loss(batch, ctx, neg_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {b}"
                )
            ad.backward(loss)
            ad.sgd_step(tensors, pcfg.lr)
            losses.append(value)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_scenes:
            record["val_mr50"] = evaluate(val_scenes, ctx, ks=(50,)).constrained[50]
        history.append(record)
    return history


def evaluate(scenes, ctx: RunContext, ks=metrics.DEFAULT_KS,
             train_combos=frozenset()) -> metrics.MetricsReport:
    scores = [score_scene(scene, ctx) for scene in scenes]
    return metrics.report(scores, scenes, ctx.model.n_predicates, ks, train_combos)


def score_all(scenes, ctx: RunContext):
    return [score_scene(scene, ctx) for scene in scenes]


def pair_argmax_accuracy(scene, ctx: RunContext) -> float:
    """Share of annotated pairs whose best non-background predicate is the
    ground truth one — the per-pair top-1 recall used by the overfit check."""
    scores = score_scene(scene, ctx)
    by_pair = {pq: row for pq, row in zip(scores.pairs, scores.logits)}
    hits = 0
    for s, o, p in scene.triplets:
        row = by_pair[(s, o)]
        if int(np.argmax(row[1:])) + 1 == p:
            hits += 1
    return hits / len(scene.triplets) if scene.triplets else 1.0


ABLATION_GRID = ("baseline", "eem", "eem+lmm", "eem+lmm+sem")

_TOGGLE_NAMES = {"eem": "use_eem", "lmm": "use_lmm", "sem": "use_sem",
                 "freq": "use_freq_baseline"}


def toggles_from_label(label: str) -> dict:
    """Parse an ablation row label like "eem+lmm" into pipeline toggles."""
    toggles = {v: False for v in _TOGGLE_NAMES.values()}
    if label != "baseline":
        for part in label.split("+"):
            if part not in _TOGGLE_NAMES:
                raise ValueError(f"unknown ablation component {part!r}")
            toggles[_TOGGLE_NAMES[part]] = True
    return toggles


def ablate(train_scenes, val_scenes, eval_scenes, model_cfg: ModelConfig,
           pipe_cfg: PipelineConfig, stats: StatsTables,
           grid=ABLATION_GRID, seeds=(0,), ks=(20, 50, 100),
           train_combos=frozenset()):
    """Train and evaluate every toggle combination on identical data/seeds.

    Returns one row per grid entry, in grid order, with per-seed mean
    recalls and their median for each K.
    """
    rows = []
    for label in grid:
        toggles = toggles_from_label(label)
        per_seed = []
        for seed in seeds:
            cfg = replace(pipe_cfg, seed=int(seed), **toggles)
            store = init_model(model_cfg, int(seed))
            ctx = RunContext(store, model_cfg, cfg, stats)
            train(train_scenes, None, ctx)
            rep = evaluate(eval_scenes, ctx, ks=ks, train_combos=train_combos)
            per_seed.append({k: rep.constrained[k] for k in ks})
        rows.append({
            "label": label,
            "seeds": list(int(s) for s in seeds),
            "per_seed": per_seed,
            "median": {k: float(np.median([r[k] for r in per_seed])) for k in ks},
        })
    return rows
