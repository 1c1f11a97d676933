import hashlib
from collections import Counter

import numpy as np
import pytest

import oracles
from sgbias import corpus
from sgbias.errors import DataError, GenerationError
from conftest import tiny_generator_config


def dataset_hash(scenes):
    h = hashlib.sha256()
    for scene in scenes:
        h.update(str(scene.scene_id).encode())
        h.update(str(scene.categories).encode())
        h.update(str(scene.triplets).encode())
        h.update(scene.node_features.tobytes())
        for pq in sorted(scene.edge_features):
            h.update(scene.edge_features[pq].tobytes())
        for b in scene.boxes:
            h.update(b.as_array().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# generation


def test_zero_scene_config_gives_empty_dataset():
    cfg = tiny_generator_config(n_scenes=0)
    assert corpus.generate_dataset(cfg) == []


def test_generation_deterministic(gen_cfg):
    a = corpus.generate_dataset(gen_cfg)
    b = corpus.generate_dataset(gen_cfg)
    assert dataset_hash(a) == dataset_hash(b)


def test_different_seed_changes_data(gen_cfg):
    a = corpus.generate_dataset(gen_cfg)
    b = corpus.generate_dataset(tiny_generator_config(seed=gen_cfg.seed + 1))
    assert dataset_hash(a) != dataset_hash(b)


def test_scenes_are_valid(scenes):
    for scene in scenes:
        scene.validate()
        assert scene.triplets, "every scene carries at least one annotation"
        n = scene.n_entities
        assert len(scene.edge_features) == n * (n - 1)


def test_impossible_box_packing_raises(monkeypatch):
    monkeypatch.setattr(corpus, "_MAX_IOU", 0.0)  # forbid any overlap at all
    cfg = tiny_generator_config(entities_min=80, entities_max=80, n_scenes=1)
    with pytest.raises(GenerationError):
        corpus.generate_dataset(cfg)


def test_bayes_accuracy_equals_row_max_mass():
    # at full language dominance the pair table rows are the whole signal
    cfg = tiny_generator_config(n_objects=5, n_predicates=6, lambda_lang=1.0,
                                sigma=0.0, n_scenes=200, seed=11)
    world = corpus.latent_world(cfg)
    n_o = cfg.n_objects

    # closed form: average of per-row max mass under uniform pair sampling
    closed = sum(world.pair_tables[s, o].max()
                 for s in range(n_o) for o in range(n_o)) / n_o ** 2

    # brute force: enumerate every (pair, predicate) outcome of the argmax rule
    brute = 0.0
    for s in range(n_o):
        for o in range(n_o):
            row = world.pair_tables[s, o]
            pick = int(np.argmax(row))
            for r in range(row.shape[0]):
                if r == pick:
                    brute += row[r] / n_o ** 2
    assert abs(brute - closed) <= 1e-9

    # empirical sanity: the argmax-by-pair predictor hits about that often
    scenes = corpus.generate_dataset(cfg)
    hits = total = 0
    for scene in scenes:
        for s, o, p in scene.triplets:
            row = world.pair_tables[scene.categories[s], scene.categories[o]]
            total += 1
            hits += int(p == int(np.argmax(row)) + 1)
    assert total > 300
    assert abs(hits / total - closed) < 0.06


def test_long_tail_top3_mass():
    cfg = corpus.GeneratorConfig(n_scenes=150, seed=0)  # desk-scale defaults
    scenes = corpus.generate_dataset(cfg)
    counts = Counter(p for sc in scenes for _, _, p in sc.triplets)
    total = sum(counts.values())
    top3 = sum(v for _, v in counts.most_common(3))
    assert top3 / total > 0.5


# ---------------------------------------------------------------------------
# statistics


def test_marginal_row_from_counts():
    # α→0 limit: counts {p1:2, p2:1, p3:1} give the plain frequency row
    cfg = tiny_generator_config()
    scenes = corpus.generate_dataset(cfg)
    stats = corpus.compute_marginals(scenes, cfg.n_objects, cfg.n_predicates,
                                     alpha=1e-12)
    # recompute one raw row by hand
    counts = Counter()
    for sc in scenes:
        for s, o, p in sc.triplets:
            counts[(sc.categories[s], p)] += 1
    cat = next(c for c, _ in (k for k in counts))  # some category with data
    row_total = sum(v for (c, _), v in counts.items() if c == cat)
    for p in range(cfg.n_predicates):
        assert stats.s_marg[cat, p] == pytest.approx(
            counts.get((cat, p), 0) / row_total, abs=1e-9)


def test_unseen_category_uniform_row():
    cfg = tiny_generator_config(n_objects=6)
    scene = corpus.generate_dataset(tiny_generator_config(n_scenes=1))[0]
    # restrict to one scene: several categories never occur as subject
    stats = corpus.compute_marginals([scene], 6, cfg.n_predicates)
    used = {scene.categories[s] for s, _, _ in scene.triplets}
    unseen = next(c for c in range(6) if c not in used)
    assert np.allclose(stats.s_marg[unseen], 1.0 / cfg.n_predicates)


def test_marginals_match_recount_oracle(gen_cfg, scenes, stats):
    s_ref, o_ref = oracles.marginals(scenes, gen_cfg.n_objects,
                                     gen_cfg.n_predicates, stats.alpha)
    assert np.allclose(stats.s_marg, s_ref, atol=1e-12)
    assert np.allclose(stats.o_marg, o_ref, atol=1e-12)
    assert np.array_equal(
        stats.freq, oracles.freq_counts(scenes, gen_cfg.n_objects,
                                        gen_cfg.n_predicates))


def test_marginal_rows_sum_to_one(stats):
    assert np.allclose(stats.s_marg.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(stats.o_marg.sum(axis=1), 1.0, atol=1e-9)


def test_empty_dataset_rejected():
    with pytest.raises(DataError):
        corpus.compute_marginals([], 4, 4)


def test_joint_target_products(stats):
    t = corpus.joint_target(1, 2, stats)
    assert np.allclose(t, stats.s_marg[1] * stats.o_marg[2])
    uniform = np.full(5, 1 / 5)
    fake = corpus.StatsTables(np.tile(uniform, (6, 1)), np.tile(uniform, (6, 1)),
                              np.zeros((6, 6, 5), dtype=np.int64), 0, 1e-3)
    assert np.allclose(corpus.joint_target(0, 0, fake), 1 / 25)


def test_joint_target_simple_rows():
    s = np.array([[0.5, 0.5]])
    o = np.array([[1.0, 0.0]])
    stats = corpus.StatsTables(s, o, np.zeros((1, 1, 2), dtype=np.int64), 0, 0.0)
    assert np.allclose(corpus.joint_target(0, 0, stats), [0.5, 0.0])


def test_freq_table_one_hot_and_uniform():
    freq = np.zeros((3, 3, 4), dtype=np.int64)
    freq[0, 1, 2] = 1
    stats = corpus.StatsTables(np.zeros((3, 4)), np.zeros((3, 4)), freq, 1, 1e-3)
    table = corpus.freq_table(stats, alpha=1e-12)
    assert table[0, 1, 2] == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(table[2, 2], 0.25)  # unseen pair → uniform


def test_stats_roundtrip(tmp_path, stats):
    path = tmp_path / "stats.ckpt.json"
    stats.save(path)
    again = corpus.StatsTables.load(path)
    assert np.array_equal(again.s_marg, stats.s_marg)
    assert np.array_equal(again.freq, stats.freq)
    assert again.n_triplets == stats.n_triplets
    assert again.alpha == stats.alpha
    assert again.train_combos() == stats.train_combos()


# ---------------------------------------------------------------------------
# zero-shot splits


def test_splits_honor_zero_shot_manifest():
    cfg = tiny_generator_config(n_scenes=30, zero_shot_count=3, seed=9)
    splits = corpus.generate_splits(cfg)
    held = set(splits.held_out)
    assert len(held) == 3

    def combos(scenes):
        return {(sc.categories[s], sc.categories[o], p)
                for sc in scenes for s, o, p in sc.triplets}

    assert not combos(splits.train) & held
    assert not combos(splits.val) & held
    assert held <= combos(splits.test)


def test_split_sizes():
    cfg = tiny_generator_config(n_scenes=20)
    splits = corpus.generate_splits(cfg)
    assert len(splits.train) == 14
    assert len(splits.val) == 2
    assert len(splits.test) == 4
    ids = [s.scene_id for s in splits.train + splits.val + splits.test]
    assert ids == sorted(set(ids))


# ---------------------------------------------------------------------------
# dataset files


def write_tmp_dataset(tmp_path, scenes, cfg):
    path = tmp_path / "scenes.jsonl"
    corpus.save_dataset(scenes, path, cfg.n_objects, cfg.n_predicates,
                        cfg.node_dim, cfg.edge_channels, cfg.edge_size)
    return path


def test_dataset_roundtrip(tmp_path, gen_cfg, scenes):
    path = write_tmp_dataset(tmp_path, scenes, gen_cfg)
    loaded, header = corpus.load_dataset(path)
    assert header["count"] == len(scenes)
    assert dataset_hash(loaded) == dataset_hash(scenes)


def test_dataset_roundtrip_bytes_stable(tmp_path, gen_cfg, scenes):
    p1 = write_tmp_dataset(tmp_path, scenes, gen_cfg)
    loaded, _ = corpus.load_dataset(p1)
    p2 = tmp_path / "again.jsonl"
    corpus.save_dataset(loaded, p2, gen_cfg.n_objects, gen_cfg.n_predicates,
                        gen_cfg.node_dim, gen_cfg.edge_channels, gen_cfg.edge_size)
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_file_errors_not_partial(tmp_path, gen_cfg, scenes):
    path = write_tmp_dataset(tmp_path, scenes, gen_cfg)
    text = path.read_text()
    # cut mid-line: the broken record reports its line; cutting exactly at a
    # line boundary is caught by the header count check instead
    path.write_text(text[: int(len(text) * 0.7)])
    with pytest.raises(DataError, match="line|promises"):
        corpus.load_dataset(path)


def test_garbage_line_reports_its_number(tmp_path, gen_cfg, scenes):
    path = write_tmp_dataset(tmp_path, scenes, gen_cfg)
    lines = path.read_text().splitlines()
    lines[2] = "{broken record"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="line 3"):
        corpus.load_dataset(path)


def test_schema_header_checked(tmp_path, gen_cfg, scenes):
    path = write_tmp_dataset(tmp_path, scenes, gen_cfg)
    lines = path.read_text().splitlines()
    lines[0] = lines[0].replace(corpus.SCENES_SCHEMA, "other.schema")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="schema"):
        corpus.load_dataset(path)


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        corpus.load_dataset(tmp_path / "missing.jsonl")


# ---------------------------------------------------------------------------
# boxes


def test_box_validation():
    with pytest.raises(ValueError):
        corpus.Box(0.9, 0.1, 0.3, 0.1)
    with pytest.raises(ValueError):
        corpus.Box(0.1, 0.1, 0.0, 0.1)
    b = corpus.Box(0.25, 0.25, 0.5, 0.5)
    assert b.iou(b) == pytest.approx(1.0)
    assert corpus.Box(0.0, 0.0, 0.2, 0.2).iou(
        corpus.Box(0.8, 0.8, 0.2, 0.2)) == 0.0


def test_manifest_roundtrip(tmp_path):
    combos = [(1, 2, 3), (0, 0, 1)]
    path = tmp_path / "zero_shot.json"
    corpus.save_manifest(combos, path)
    assert corpus.load_manifest(path) == combos
