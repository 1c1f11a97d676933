"""Scene-graph evaluation: ranked candidates and recall-based metrics.

Two ranking protocols share one scoring convention (per-pair softmax
probabilities, background dropped from candidacy):

* constrained — each ordered pair contributes only its single best
  non-background predicate;
* unconstrained — every (pair, predicate) combination competes.

A ground-truth triplet is hit iff an identical (subject, object, predicate)
candidate appears in the scene's top K. Per-predicate recall aggregates
hits/GT over all scenes within a predicate; the mean is taken across
predicates that have at least one ground-truth instance. Zero-shot recall
restricts ground truth to category combos never seen in training and is a
plain aggregate recall, not a per-predicate mean. Ties are broken by
(subject, object, predicate) ascending so rankings are deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

PREDICTIONS_SCHEMA = "sgbias.predictions.v1"
REPORT_SCHEMA = "sgbias.report.v1"

DEFAULT_KS = (1, 5, 10, 20, 50, 100)


@dataclass(frozen=True)
class RelationScores:
    """Raw fused logits for the scored ordered pairs of one scene."""

    scene_id: int
    pairs: tuple                # ((i, j), ...)
    logits: np.ndarray          # len(pairs) × N_r

    def __post_init__(self):
        if self.logits.shape[0] != len(self.pairs):
            raise DataError(
                f"scene {self.scene_id}: {len(self.pairs)} pairs vs "
                f"{self.logits.shape[0]} logit rows"
            )
        if not np.all(np.isfinite(self.logits)):
            raise DataError(f"scene {self.scene_id}: non-finite scores")


@dataclass(frozen=True)
class RankedPrediction:
    """Scored candidates sorted by descending score, ties broken by ids."""

    scene_id: int
    candidates: tuple           # ((s, o, p, score), ...)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _ranked(scene_id, raw) -> RankedPrediction:
    ordered = sorted(raw, key=lambda c: (-c[3], c[0], c[1], c[2]))
    return RankedPrediction(scene_id, tuple(ordered))


def rank_constrained(scores: RelationScores) -> RankedPrediction:
    """Keep only the best non-background predicate of each ordered pair."""
    probs = _softmax_rows(scores.logits)
    raw = []
    for (i, j), row in zip(scores.pairs, probs):
        p = int(np.argmax(row[1:])) + 1  # argmax ties resolve to lower id
        raw.append((i, j, p, float(row[p])))
    return _ranked(scores.scene_id, raw)


def rank_unconstrained(scores: RelationScores) -> RankedPrediction:
    """Every (pair, non-background predicate) candidate enters the ranking."""
    probs = _softmax_rows(scores.logits)
    raw = [
        (i, j, p, float(row[p]))
        for (i, j), row in zip(scores.pairs, probs)
        for p in range(1, probs.shape[1])
    ]
    return _ranked(scores.scene_id, raw)


def _top_k_set(pred: RankedPrediction, k: int) -> set:
    return {(s, o, p) for s, o, p, _ in pred.candidates[:k]}


def mean_recall_at_k(predictions, scenes, k: int, n_predicates: int):
    """Per-predicate recalls and their mean over predicates with ground truth.

    Returns (mean, per_predicate, hits, totals); per_predicate holds NaN for
    predicates that never occur in the ground truth, and those are excluded
    from the mean rather than scored zero.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    _check_alignment(predictions, scenes)
    hits = np.zeros(n_predicates)
    totals = np.zeros(n_predicates)
    for pred, scene in zip(predictions, scenes):
        top = _top_k_set(pred, k)
        for s, o, p in scene.triplets:
            totals[p] += 1
            if (s, o, p) in top:
                hits[p] += 1
    with np.errstate(invalid="ignore"):
        per_predicate = np.where(totals > 0, hits / np.maximum(totals, 1), np.nan)
    seen = totals > 0
    mean = float(per_predicate[seen].mean()) if seen.any() else 0.0
    return mean, per_predicate, hits, totals


def zero_shot_recall(predictions, scenes, train_combos, k: int):
    """Aggregate recall over GT triplets whose category combo is unseen in
    training. Returns (recall or None, zero-shot GT count)."""
    _check_alignment(predictions, scenes)
    hits = 0
    total = 0
    for pred, scene in zip(predictions, scenes):
        top = _top_k_set(pred, k)
        for s, o, p in scene.triplets:
            combo = (scene.categories[s], scene.categories[o], p)
            if combo in train_combos:
                continue
            total += 1
            if (s, o, p) in top:
                hits += 1
    if total == 0:
        return None, 0
    return hits / total, total


def _check_alignment(predictions, scenes):
    if len(predictions) != len(scenes):
        raise DataError(
            f"{len(predictions)} predictions for {len(scenes)} scenes"
        )
    for pred, scene in zip(predictions, scenes):
        if pred.scene_id != scene.scene_id:
            raise DataError(
                f"scene id mismatch: prediction {pred.scene_id} vs "
                f"scene {scene.scene_id}"
            )


@dataclass
class MetricsReport:
    """All metrics for one evaluation run; serializes deterministically."""

    ks: tuple
    constrained: dict      # k → mean recall
    unconstrained: dict    # k → mean recall
    zero_shot: dict        # k → recall or None
    per_predicate: dict    # predicate id → recall at max k (constrained), NaN-free
    counts: dict

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "ks": list(self.ks),
            "mean_recall": {str(k): self.constrained[k] for k in self.ks},
            "ng_mean_recall": {str(k): self.unconstrained[k] for k in self.ks},
            "zero_shot_recall": {str(k): self.zero_shot[k] for k in self.ks},
            "per_predicate": {str(p): v for p, v in sorted(self.per_predicate.items())},
            "counts": dict(sorted(self.counts.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        if doc.get("schema") != REPORT_SCHEMA:
            raise DataError(f"report schema mismatch, got {doc.get('schema')!r}")
        ks = tuple(doc["ks"])
        return cls(
            ks=ks,
            constrained={k: doc["mean_recall"][str(k)] for k in ks},
            unconstrained={k: doc["ng_mean_recall"][str(k)] for k in ks},
            zero_shot={k: doc["zero_shot_recall"][str(k)] for k in ks},
            per_predicate={int(p): v for p, v in doc["per_predicate"].items()},
            counts=doc["counts"],
        )

    @classmethod
    def load(cls, path) -> "MetricsReport":
        p = Path(path)
        if not p.exists():
            raise DataError(f"no such report file: {p}")
        try:
            return cls.from_dict(json.loads(p.read_text()))
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{p}: malformed report ({exc})") from None


def report(scores_list, scenes, n_predicates: int, ks=DEFAULT_KS,
           train_combos=frozenset()) -> MetricsReport:
    """Aggregate every metric over a dataset of scored scenes."""
    if not scenes:
        raise DataError("report: empty dataset")
    _check_alignment(scores_list, scenes)
    constrained = [rank_constrained(s) for s in scores_list]
    unconstrained = [rank_unconstrained(s) for s in scores_list]
    ks = tuple(sorted(set(int(k) for k in ks)))

    mr, ng, zs = {}, {}, {}
    per_pred_last = None
    hits_last = totals_last = None
    for k in ks:
        mr[k], per_pred, hits, totals = mean_recall_at_k(
            constrained, scenes, k, n_predicates)
        ng[k], _, _, _ = mean_recall_at_k(unconstrained, scenes, k, n_predicates)
        zs[k], zs_count = zero_shot_recall(constrained, scenes, train_combos, k)
        per_pred_last, hits_last, totals_last = per_pred, hits, totals

    per_predicate = {
        p: float(per_pred_last[p])
        for p in range(n_predicates)
        if totals_last[p] > 0
    }
    counts = {
        "scenes": len(scenes),
        "gt_triplets": int(totals_last.sum()),
        "hits_at_max_k": int(hits_last.sum()),
        "zero_shot_gt": int(zs_count),
        "predicates_with_gt": int((totals_last > 0).sum()),
    }
    return MetricsReport(ks, mr, ng, zs, per_predicate, counts)


# ---------------------------------------------------------------------------
# predictions file


def save_predictions(predictions, path):
    """Write ranked candidate lists, one scene per line after the header."""
    lines = [json.dumps({"schema": PREDICTIONS_SCHEMA, "count": len(predictions)},
                        sort_keys=True)]
    for pred in predictions:
        lines.append(json.dumps({
            "scene_id": pred.scene_id,
            "candidates": [[s, o, p, score] for s, o, p, score in pred.candidates],
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_predictions(path):
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such predictions file: {p}")
    lines = p.read_text().splitlines()
    if not lines:
        raise DataError(f"{p}: empty predictions file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{p} line 1: parse error ({exc.msg})") from None
    if header.get("schema") != PREDICTIONS_SCHEMA:
        raise DataError(f"{p} line 1: schema mismatch, got {header.get('schema')!r}")
    preds = []
    for no, text in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(text)
            cands = tuple((int(s), int(o), int(p), float(v))
                          for s, o, p, v in rec["candidates"])
            preds.append(RankedPrediction(int(rec["scene_id"]), cands))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{p} line {no}: malformed record ({exc})") from None
    if len(preds) != int(header.get("count", len(preds))):
        raise DataError(f"{p}: header count disagrees with record count")
    return preds
