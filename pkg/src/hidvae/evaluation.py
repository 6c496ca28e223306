"""Ranking metrics, ID collision rate, per-level tag accuracy and latent export."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import SplitLog, feature_matrix


def _check_ranking(ranked: Sequence[str]) -> None:
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranking contains duplicate items")


def rank_of(ranked: Sequence[str], target: str) -> int | None:
    """1-based position of ``target``, or None."""
    _check_ranking(ranked)
    try:
        return ranked.index(target) + 1
    except ValueError:
        return None


def recall_at_k(ranked: Sequence[str], target: str, k: int) -> int:
    r = rank_of(list(ranked), target)
    return int(r is not None and r <= k)


def ndcg_at_k(ranked: Sequence[str], target: str, k: int) -> float:
    """Binary relevance with a single target, so the ideal DCG is 1."""
    r = rank_of(list(ranked), target)
    if r is None or r > k:
        return 0.0
    return 1.0 / float(np.log2(r + 1))


def collision_rate(id_map: Mapping[str, object]) -> float:
    """Share of items whose code tuple is also held by another item.

    Accepts SemanticIDs (suffixes ignored) or plain code tuples.
    """
    if not id_map:
        raise ValueError("empty id map")
    keys = [tuple(getattr(v, "codes", v)) for v in id_map.values()]
    counts = Counter(keys)
    return sum(1 for k in keys if counts[k] > 1) / len(keys)


@dataclass
class LayerAccuracy:
    level: int
    accuracy: float | None
    n_classes_effective: int
    n_items: int


def per_layer_tag_accuracy(state, catalog, min_class_count: int = 30, predictions: np.ndarray | None = None
                           ) -> list[LayerAccuracy]:
    """Classifier accuracy per supervised level over items whose true tag has
    at least ``min_class_count`` members. An empty evaluation set reports
    ``accuracy=None``.
    """
    items = list(catalog.values())
    if predictions is None:
        predictions = state.predict_tags(feature_matrix(catalog, state.config.d_in))
    out = []
    for l in range(predictions.shape[1]):
        truth = np.array([it.tags[l] for it in items])
        counts = Counter(truth.tolist())
        keep = np.array([counts[t] >= min_class_count for t in truth.tolist()], dtype=bool)
        n_eff = sum(1 for c in counts.values() if c >= min_class_count)
        acc = float((predictions[keep, l] == truth[keep]).mean()) if keep.any() else None
        out.append(LayerAccuracy(l + 1, acc, n_eff, int(keep.sum())))
    return out


def export_latents(state, catalog, path) -> None:
    """TSV of item_id, z0 components and the code tuple."""
    d, L = state.config.d, state.config.L
    header = ["item_id", *[f"z{j}" for j in range(d)], *[f"code_{l + 1}" for l in range(L)]]
    if catalog:
        X = feature_matrix(catalog, state.config.d_in)
        z0 = state.encode(X)
        codes = state.codes(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for i, item_id in enumerate(catalog):
            w.writerow([item_id, *[repr(float(v)) for v in z0[i]], *[int(c) for c in codes[i]]])


def read_latents(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("z"))
    ids = [r[0] for r in body]
    z = np.array([[float(v) for v in r[1:1 + d]] for r in body]).reshape(len(body), d)
    codes = np.array([[int(v) for v in r[1 + d:]] for r in body], dtype=np.int64).reshape(len(body), -1)
    return ids, z, codes


@dataclass
class MetricReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    collision_rate: float | None = None
    per_layer_accuracy: list[LayerAccuracy] = field(default_factory=list)

    def __post_init__(self):
        vals = list(self.recall.values()) + list(self.ndcg.values())
        if self.collision_rate is not None:
            vals.append(self.collision_rate)
        vals += [a.accuracy for a in self.per_layer_accuracy if a.accuracy is not None]
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError("metric outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "n_users": self.n_users,
            "collision_rate": self.collision_rate,
            "per_layer_accuracy": [asdict(a) for a in self.per_layer_accuracy],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            {int(k): v for k, v in d["recall"].items()},
            {int(k): v for k, v in d["ndcg"].items()},
            d["n_users"],
            d.get("collision_rate"),
            [LayerAccuracy(**a) for a in d.get("per_layer_accuracy", [])],
        )


def ranking_metrics(rankings: Mapping[str, Sequence[str]], targets: Mapping[str, str], ks: Sequence[int]):
    """Macro averages over users: ``(recall, ndcg)`` keyed by k."""
    users = sorted(targets)
    if not users:
        raise ValueError("no users to evaluate")
    recall = {k: 0.0 for k in ks}
    ndcg = {k: 0.0 for k in ks}
    for u in users:
        for k in ks:
            recall[k] += recall_at_k(rankings[u], targets[u], k)
            ndcg[k] += ndcg_at_k(rankings[u], targets[u], k)
    n = len(users)
    return {k: v / n for k, v in recall.items()}, {k: v / n for k, v in ndcg.items()}


def targets_of(split: SplitLog, stage: str = "test") -> dict[str, str]:
    if stage not in ("valid", "test"):
        raise ValueError(f"unknown stage {stage!r}")
    return {u: getattr(split, stage)[u] for u in split.users}


def evaluate_recommender(rec_state, split: SplitLog, id_map, trie, ks: Sequence[int] = (5, 10),
                         stage: str = "test") -> tuple[dict, dict, dict[str, list[str]]]:
    """Generate top-max(ks) for every user and score against the held-out item."""
    from .recommender.generate import generate

    users = list(split.users)
    histories = [[id_map[i] for i in split.history(u, stage)] for u in users]
    recs = generate(rec_state.model, histories, trie, max(ks))
    rankings = {u: [r.item_id for r in rs] for u, rs in zip(users, recs)}
    recall, ndcg = ranking_metrics(rankings, targets_of(split, stage), ks)
    return recall, ndcg, rankings


def evaluate_popularity(split: SplitLog, ks: Sequence[int] = (5, 10), stage: str = "test"):
    from .recommender.generate import popularity_baseline

    top = popularity_baseline(split.train, max(ks))
    rankings = {u: top for u in split.users}
    return ranking_metrics(rankings, targets_of(split, stage), ks)
