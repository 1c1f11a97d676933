"""Synthetic long-tailed scene-graph corpus and its summary statistics.

Scenes are generated from a latent pair table: for every ordered category
pair (s, o) there is a distribution over non-background predicates that
mixes a Zipf-tailed global prior with a pair-specific peak. The mixing
weight ``lambda_lang`` controls how much of the predicate signal is carried
by the category pair; edge features are attenuated by (1 − lambda_lang) so
at lambda_lang → 1 vision is pure noise. Drawing the pair peaks from the
Zipf prior keeps the marginal predicate frequency exactly Zipf at any
lambda_lang, which preserves the long tail.

Generation is deterministic: every random draw comes from a generator keyed
by (config seed, purpose, scene id), so scenes are independent of each
other and of generation order.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, GenerationError

SCENES_SCHEMA = "sgbias.scenes.v1"
MANIFEST_SCHEMA = "sgbias.zeroshot.v1"

# share of a pair-specific distribution sitting on its single preferred predicate
PEAK_MASS = 0.9

_BOX_TRIES = 100
_MAX_IOU = 0.4


@dataclass(frozen=True)
class Vocabulary:
    """Object and predicate category names; predicate 0 is "no relation"."""

    object_names: tuple
    predicate_names: tuple

    def __post_init__(self):
        if len(self.object_names) < 2 or len(self.predicate_names) < 2:
            raise ValueError("vocabulary needs at least 2 objects and 2 predicates")
        if len(set(self.object_names)) != len(self.object_names):
            raise ValueError("object names must be unique")
        if len(set(self.predicate_names)) != len(self.predicate_names):
            raise ValueError("predicate names must be unique")

    @property
    def n_objects(self) -> int:
        return len(self.object_names)

    @property
    def n_predicates(self) -> int:
        return len(self.predicate_names)

    @classmethod
    def synthetic(cls, n_objects: int, n_predicates: int) -> "Vocabulary":
        objs = tuple(f"obj{i:02d}" for i in range(n_objects))
        preds = ("none",) + tuple(f"rel{i:02d}" for i in range(1, n_predicates))
        return cls(objs, preds)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box normalized to the unit image; w, h strictly positive."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        eps = 1e-9
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")
        if self.x < 0 or self.y < 0 or self.x + self.w > 1 + eps or self.y + self.h > 1 + eps:
            raise ValueError(f"box {self} exceeds the unit image")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h])

    def iou(self, other: "Box") -> float:
        ix = max(0.0, min(self.x + self.w, other.x + other.w) - max(self.x, other.x))
        iy = max(0.0, min(self.y + self.h, other.y + other.h) - max(self.y, other.y))
        inter = ix * iy
        union = self.w * self.h + other.w * other.h - inter
        return inter / union if union > 0 else 0.0


@dataclass
class SceneSample:
    """One synthetic image: entities, per-pair edge features, annotations."""

    scene_id: int
    categories: list
    boxes: list
    node_features: np.ndarray              # n × D_n
    edge_features: dict                    # (i, j) → C × D_p × D_p, i != j
    triplets: list                         # (subject idx, object idx, predicate != 0)

    @property
    def n_entities(self) -> int:
        return len(self.categories)

    def ordered_pairs(self):
        n = self.n_entities
        return [(i, j) for i in range(n) for j in range(n) if i != j]

    def validate(self):
        n = self.n_entities
        if len(self.boxes) != n or self.node_features.shape[0] != n:
            raise DataError(f"scene {self.scene_id}: entity field lengths disagree")
        seen = set()
        for s, o, p in self.triplets:
            if not (0 <= s < n and 0 <= o < n) or s == o:
                raise DataError(f"scene {self.scene_id}: bad triplet indices ({s},{o})")
            if p == 0:
                raise DataError(f"scene {self.scene_id}: background predicate in triplet")
            if (s, o, p) in seen:
                raise DataError(f"scene {self.scene_id}: duplicate triplet ({s},{o},{p})")
            seen.add((s, o, p))
            if (s, o) not in self.edge_features:
                raise DataError(
                    f"scene {self.scene_id}: triplet pair ({s},{o}) has no edge feature"
                )
        return self


@dataclass(frozen=True)
class GeneratorConfig:
    n_objects: int = 20
    n_predicates: int = 15
    n_scenes: int = 100
    entities_min: int = 3
    entities_max: int = 6
    zipf_exponent: float = 1.2
    lambda_lang: float = 0.9
    sigma: float = 0.05
    node_dim: int = 16
    edge_channels: int = 8
    edge_size: int = 4
    edge_density: float = 0.4
    zero_shot_count: int = 10
    split_train: float = 0.7
    split_val: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lambda_lang <= 1.0:
            raise ValueError(f"lambda_lang must be in [0,1], got {self.lambda_lang}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if self.n_objects < 2 or self.n_predicates < 2:
            raise ValueError("need at least 2 object and 2 predicate categories")
        if self.entities_min < 2 or self.entities_max < self.entities_min:
            raise ValueError("entities-per-scene range must be sane and start at 2")
        if not 0.0 < self.edge_density <= 1.0:
            raise ValueError(f"edge_density must be in (0,1], got {self.edge_density}")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be nonnegative")
        if self.n_scenes < 0 or self.zero_shot_count < 0:
            raise ValueError("counts must be nonnegative")
        if not (0 < self.split_train < 1 and 0 <= self.split_val < 1
                and self.split_train + self.split_val < 1):
            raise ValueError("split fractions must leave room for a test split")

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.synthetic(self.n_objects, self.n_predicates)


@dataclass
class LatentWorld:
    """Ground truth the generator samples from; exposed for test oracles."""

    zipf_prior: np.ndarray       # over predicate ids 1..N_r-1
    preferred: np.ndarray        # N_o × N_o preferred predicate id
    pair_tables: np.ndarray      # N_o × N_o × (N_r-1), rows sum to 1
    category_protos: np.ndarray  # N_o × D_n unit rows
    predicate_protos: np.ndarray  # N_r × C, row 0 zero


def _rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def latent_world(config: GeneratorConfig) -> LatentWorld:
    rng = _rng(config.seed, 0)
    nr = config.n_predicates - 1
    ranks = np.arange(1, nr + 1, dtype=np.float64)
    z = ranks ** -config.zipf_exponent
    z /= z.sum()
    preferred = rng.choice(nr, size=(config.n_objects, config.n_objects), p=z) + 1
    peak = np.broadcast_to((1.0 - PEAK_MASS) * z,
                           (config.n_objects, config.n_objects, nr)).copy()
    s_idx, o_idx = np.indices(preferred.shape)
    peak[s_idx, o_idx, preferred - 1] += PEAK_MASS
    tables = (1.0 - config.lambda_lang) * z + config.lambda_lang * peak

    protos = rng.normal(size=(config.n_objects, config.node_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    pred_protos = np.zeros((config.n_predicates, config.edge_channels))
    raw = rng.normal(size=(nr, config.edge_channels))
    pred_protos[1:] = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return LatentWorld(z, preferred, tables, protos, pred_protos)


def _sample_boxes(n: int, rng: np.random.Generator) -> list:
    boxes = []
    for _ in range(n):
        for attempt in range(_BOX_TRIES):
            w = rng.uniform(0.08, 0.28)
            h = rng.uniform(0.08, 0.28)
            x = rng.uniform(0.0, 1.0 - w)
            y = rng.uniform(0.0, 1.0 - h)
            cand = Box(x, y, w, h)
            if all(cand.iou(b) <= _MAX_IOU for b in boxes):
                boxes.append(cand)
                break
        else:
            raise GenerationError(
                f"could not place entity {len(boxes)} after {_BOX_TRIES} tries"
            )
    return boxes


def _pick_predicate(row: np.ndarray, s_cat: int, o_cat: int, denied,
                    rng: np.random.Generator) -> int:
    nr = row.shape[0]
    p = int(rng.choice(nr, p=row)) + 1
    if (s_cat, o_cat, p) not in denied:
        return p
    allowed = row.copy()
    for r in range(1, nr + 1):
        if (s_cat, o_cat, r) in denied:
            allowed[r - 1] = 0.0
    total = allowed.sum()
    if total <= 0:
        raise GenerationError(f"all predicates for pair ({s_cat},{o_cat}) held out")
    return int(rng.choice(nr, p=allowed / total)) + 1


def _sample_scene(scene_id: int, world: LatentWorld, config: GeneratorConfig,
                  rng: np.random.Generator, denied=frozenset(),
                  forced=None) -> SceneSample:
    n = int(rng.integers(config.entities_min, config.entities_max + 1))
    cats = rng.integers(0, config.n_objects, size=n)
    if forced is not None:
        cats[0], cats[1] = forced[0], forced[1]
    cats = [int(c) for c in cats]
    boxes = _sample_boxes(n, rng)

    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    annotated = [pq for pq in pairs if rng.random() < config.edge_density]
    if forced is not None and (0, 1) not in annotated:
        annotated.insert(0, (0, 1))
    if not annotated:
        annotated = [pairs[int(rng.integers(len(pairs)))]]

    predicate = {}
    for i, j in annotated:
        if forced is not None and (i, j) == (0, 1):
            predicate[(i, j)] = forced[2]
        else:
            row = world.pair_tables[cats[i], cats[j]]
            predicate[(i, j)] = _pick_predicate(row, cats[i], cats[j], denied, rng)
    triplets = [(i, j, predicate[(i, j)]) for i, j in sorted(predicate)]

    node_features = world.category_protos[cats] + rng.normal(
        0.0, config.sigma, size=(n, config.node_dim))

    vision_gain = 1.0 - config.lambda_lang
    shape = (config.edge_channels, config.edge_size, config.edge_size)
    edge_features = {}
    for i, j in pairs:
        proto = world.predicate_protos[predicate.get((i, j), 0)]
        signal = vision_gain * proto[:, None, None]
        edge_features[(i, j)] = signal + rng.normal(0.0, config.sigma, size=shape)

    return SceneSample(scene_id, cats, boxes, node_features, edge_features,
                       triplets).validate()


def generate_dataset(config: GeneratorConfig) -> list:
    """One flat pool of scenes, deterministic in (config, seed)."""
    world = latent_world(config)
    return [
        _sample_scene(i, world, config, _rng(config.seed, 1, i))
        for i in range(config.n_scenes)
    ]


@dataclass
class DatasetSplits:
    train: list
    val: list
    test: list
    held_out: list  # (s_cat, o_cat, predicate) combos absent from train+val
    world: LatentWorld


def generate_splits(config: GeneratorConfig) -> DatasetSplits:
    """Train/val/test scenes plus a zero-shot manifest.

    Held-out (subject, object, predicate) combos are resampled away from the
    train and val scenes and force-included in the leading test scenes, so
    they are guaranteed absent from training and present in test.
    """
    world = latent_world(config)
    n = config.n_scenes
    n_train = int(round(config.split_train * n))
    n_val = int(round(config.split_val * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    n_test = n - n_train - n_val

    z_count = min(config.zero_shot_count, n_test, config.n_objects ** 2)
    zs_rng = _rng(config.seed, 2)
    flat = zs_rng.choice(config.n_objects ** 2, size=z_count, replace=False)
    held_out = []
    for f in flat:
        s_cat, o_cat = int(f) // config.n_objects, int(f) % config.n_objects
        held_out.append((s_cat, o_cat, int(world.preferred[s_cat, o_cat])))
    denied = frozenset(held_out)

    def build(ids, deny, force_from=None):
        scenes = []
        for k, sid in enumerate(ids):
            forced = None
            if force_from is not None and k < len(force_from):
                forced = force_from[k]
            scenes.append(_sample_scene(
                sid, world, config, _rng(config.seed, 1, sid), deny, forced))
        return scenes

    train = build(range(n_train), denied)
    val = build(range(n_train, n_train + n_val), denied)
    test = build(range(n_train + n_val, n), frozenset(), force_from=held_out)
    return DatasetSplits(train, val, test, held_out, world)


# ---------------------------------------------------------------------------
# statistics


@dataclass
class StatsTables:
    """Marginals and triplet co-occurrence counts over a training split."""

    s_marg: np.ndarray       # N_o × N_r rows summing to 1 (smoothed)
    o_marg: np.ndarray       # N_o × N_r
    freq: np.ndarray         # N_o × N_o × N_r nonnegative integer counts
    n_triplets: int
    alpha: float

    def train_combos(self) -> set:
        """Category-level (s, o, p) combos observed at least once."""
        s, o, p = np.nonzero(self.freq)
        return {(int(a), int(b), int(c)) for a, b, c in zip(s, o, p)}

    def save(self, path):
        from .params import write_array_doc

        write_array_doc(path, {
            "s_marg": self.s_marg,
            "o_marg": self.o_marg,
            "freq": self.freq.astype(np.float64),
            "meta": np.array([float(self.n_triplets), self.alpha]),
        })

    @classmethod
    def load(cls, path) -> "StatsTables":
        from .params import read_array_doc

        arrays = read_array_doc(path)
        try:
            meta = arrays["meta"]
            return cls(arrays["s_marg"], arrays["o_marg"],
                       arrays["freq"].astype(np.int64), int(meta[0]), float(meta[1]))
        except KeyError as exc:
            raise DataError(f"{path}: stats file is missing entry {exc}") from None


def compute_marginals(scenes, n_objects: int, n_predicates: int,
                      alpha: float = 1e-3) -> StatsTables:
    """Subject/object marginal distributions over predicates, plus counts.

    Additive smoothing places alpha in every cell including the background
    column, so unseen categories give an exactly uniform 1/N_r row and every
    row sums to 1. Background never receives real counts because triplets
    cannot carry predicate 0.
    """
    if not scenes:
        raise DataError("compute_marginals: empty dataset")
    s_counts = np.zeros((n_objects, n_predicates))
    o_counts = np.zeros((n_objects, n_predicates))
    freq = np.zeros((n_objects, n_objects, n_predicates), dtype=np.int64)
    total = 0
    for scene in scenes:
        for s, o, p in scene.triplets:
            sc, oc = scene.categories[s], scene.categories[o]
            s_counts[sc, p] += 1
            o_counts[oc, p] += 1
            freq[sc, oc, p] += 1
            total += 1

    def smooth(counts):
        return (counts + alpha) / (counts.sum(axis=1, keepdims=True)
                                   + alpha * n_predicates)

    return StatsTables(smooth(s_counts), smooth(o_counts), freq, total, alpha)


def joint_target(s_cat: int, o_cat: int, stats: StatsTables) -> np.ndarray:
    """Elementwise product of the two marginal rows; deliberately not
    renormalized (the cosine objective is scale-invariant)."""
    return stats.s_marg[s_cat] * stats.o_marg[o_cat]


def freq_table(stats: StatsTables, alpha: float | None = None) -> np.ndarray:
    """Per-pair predicate distribution from raw co-occurrence counts."""
    a = stats.alpha if alpha is None else alpha
    counts = stats.freq.astype(np.float64)
    return (counts + a) / (counts.sum(axis=2, keepdims=True) + a * counts.shape[2])


# ---------------------------------------------------------------------------
# dataset files: one JSON record per line, schema header first


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode()


def _decode(blob: str, shape, where: str) -> np.ndarray:
    try:
        raw = base64.b64decode(blob.encode(), validate=True)
        arr = np.frombuffer(raw, dtype="<f8")
    except (ValueError, TypeError) as exc:
        raise DataError(f"{where}: bad feature blob ({exc})") from None
    expect = int(np.prod(shape, dtype=np.int64))
    if arr.size != expect:
        raise DataError(f"{where}: blob holds {arr.size} values, expected {expect}")
    return arr.reshape(shape).copy()


def save_dataset(scenes, path, n_objects: int, n_predicates: int,
                 node_dim: int, edge_channels: int, edge_size: int):
    lines = [json.dumps({
        "schema": SCENES_SCHEMA,
        "count": len(scenes),
        "n_objects": n_objects,
        "n_predicates": n_predicates,
        "node_dim": node_dim,
        "edge_channels": edge_channels,
        "edge_size": edge_size,
    }, sort_keys=True)]
    for scene in scenes:
        pairs = sorted(scene.edge_features)
        stacked = np.stack([scene.edge_features[pq] for pq in pairs]) if pairs \
            else np.zeros((0, edge_channels, edge_size, edge_size))
        lines.append(json.dumps({
            "scene_id": scene.scene_id,
            "entities": [
                {"category": int(c), "box": [b.x, b.y, b.w, b.h]}
                for c, b in zip(scene.categories, scene.boxes)
            ],
            "triplets": [[int(s), int(o), int(p)] for s, o, p in scene.triplets],
            "node_features": _encode(scene.node_features),
            "edge_pairs": [[int(i), int(j)] for i, j in pairs],
            "edge_features": _encode(stacked),
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path):
    """Read a dataset file; returns (scenes, header). Any malformed line
    aborts the whole load with the offending line number."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such dataset file: {p}")
    lines = p.read_text().splitlines()
    if not lines:
        raise DataError(f"{p}: empty dataset file")

    def parse(line_no, text):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{p} line {line_no}: parse error ({exc.msg})") from None

    header = parse(1, lines[0])
    if header.get("schema") != SCENES_SCHEMA:
        raise DataError(
            f"{p} line 1: schema mismatch, expected {SCENES_SCHEMA!r}, "
            f"got {header.get('schema')!r}"
        )
    dn, c, dp = header["node_dim"], header["edge_channels"], header["edge_size"]
    n_obj = int(header.get("n_objects", 0))
    n_pred = int(header.get("n_predicates", 0))
    scenes = []
    for no, text in enumerate(lines[1:], start=2):
        rec = parse(no, text)
        where = f"{p} line {no}"
        try:
            cats = [int(e["category"]) for e in rec["entities"]]
            boxes = [Box(*e["box"]) for e in rec["entities"]]
            n = len(cats)
            node_features = _decode(rec["node_features"], (n, dn), where)
            pairs = [tuple(pq) for pq in rec["edge_pairs"]]
            stacked = _decode(rec["edge_features"], (len(pairs), c, dp, dp), where)
            edge_features = {pq: stacked[k] for k, pq in enumerate(pairs)}
            triplets = [tuple(t) for t in rec["triplets"]]
            scene = SceneSample(int(rec["scene_id"]), cats, boxes, node_features,
                                edge_features, triplets).validate()
            if n_obj and any(cc >= n_obj or cc < 0 for cc in cats):
                raise ValueError("category id outside the declared vocabulary")
            if n_pred and any(t[2] >= n_pred for t in triplets):
                raise ValueError("predicate id outside the declared vocabulary")
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{where}: malformed scene record ({exc})") from None
        scenes.append(scene)
    count = int(header["count"])
    if len(scenes) != count:
        raise DataError(
            f"{p}: header promises {count} scenes, file has {len(scenes)}"
        )
    return scenes, header


def save_manifest(held_out, path):
    doc = {"schema": MANIFEST_SCHEMA,
           "held_out": [[int(s), int(o), int(p)] for s, o, p in held_out]}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_manifest(path):
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such manifest file: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: parse error ({exc.msg})") from None
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise DataError(f"{p}: schema mismatch, got {doc.get('schema')!r}")
    return [tuple(combo) for combo in doc["held_out"]]
