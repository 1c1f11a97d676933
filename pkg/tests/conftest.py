import numpy as np
import pytest

from sgbias import corpus, experience, language_map, pipeline, scene_encoder


def tiny_model_config(n_objects=6, n_predicates=5, node_dim=6, edge_channels=4,
                      edge_size=4, share_embeddings=True):
    return pipeline.ModelConfig(
        n_objects=n_objects,
        n_predicates=n_predicates,
        node_dim=node_dim,
        edge_channels=edge_channels,
        edge_size=edge_size,
        eem=experience.ExperienceConfig(n_objects, n_predicates,
                                        embed_dim=8, proj_dim=8, hidden_dim=16),
        lmm=language_map.LanguageMapConfig(channels=edge_channels, pool_size=4,
                                           embed_dim=8,
                                           share_embeddings=share_embeddings),
        sem=scene_encoder.SceneEncoderConfig(n_objects, embed_dim=8, pos_dim=4,
                                             layers=1, heads=2, model_dim=8,
                                             ffn_dim=8, out_dim=8),
        baseline_hidden=16,
    )


def tiny_generator_config(**overrides):
    defaults = dict(n_objects=6, n_predicates=5, n_scenes=12, entities_min=3,
                    entities_max=4, node_dim=6, edge_channels=4, edge_size=4,
                    zero_shot_count=2, seed=3)
    defaults.update(overrides)
    return corpus.GeneratorConfig(**defaults)


@pytest.fixture
def gen_cfg():
    return tiny_generator_config()


@pytest.fixture
def scenes(gen_cfg):
    return corpus.generate_dataset(gen_cfg)


@pytest.fixture
def stats(gen_cfg, scenes):
    return corpus.compute_marginals(scenes, gen_cfg.n_objects, gen_cfg.n_predicates)


@pytest.fixture
def model_cfg():
    return tiny_model_config()


@pytest.fixture
def make_ctx(model_cfg, stats):
    def build(seed=0, **pipe_overrides):
        pcfg = pipeline.PipelineConfig(seed=seed, **pipe_overrides)
        store = pipeline.init_model(model_cfg, seed)
        return pipeline.RunContext(store, model_cfg, pcfg, stats)
    return build


def rng_boxes(rng, n):
    boxes = []
    for _ in range(n):
        w = rng.uniform(0.05, 0.3)
        h = rng.uniform(0.05, 0.3)
        boxes.append(corpus.Box(rng.uniform(0, 1 - w), rng.uniform(0, 1 - h), w, h))
    return boxes


def random_scene(rng, scene_id=0, n_objects=6, n_predicates=5, node_dim=6,
                 edge_channels=4, edge_size=4, max_entities=4):
    """A structurally valid random scene, unrelated to the generator."""
    n = int(rng.integers(2, max_entities + 1))
    cats = [int(c) for c in rng.integers(0, n_objects, size=n)]
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    edge = {pq: rng.normal(size=(edge_channels, edge_size, edge_size))
            for pq in pairs}
    n_trip = int(rng.integers(1, min(len(pairs), 4) + 1))
    chosen = rng.choice(len(pairs), size=n_trip, replace=False)
    triplets = sorted(
        {(pairs[int(c)][0], pairs[int(c)][1],
          int(rng.integers(1, n_predicates))) for c in chosen})
    return corpus.SceneSample(
        scene_id, cats, rng_boxes(rng, n),
        rng.normal(size=(n, node_dim)), edge, triplets).validate()
