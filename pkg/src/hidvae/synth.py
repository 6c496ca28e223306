"""Synthetic catalogs with a known category tree and user preference structure.

Leaf centers are sums of per-level Gaussian offsets, so the feature space has
the same coarse-to-fine structure as the tag tree. Tag embeddings are the
category centers themselves. Scales are per vector, not per coordinate: a
level offset has expected norm ``level_scales[l]`` and item noise has expected
norm ``sigma``, which keeps features near unit norm like sentence embeddings.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import InteractionLog, Item, TagHierarchy, save_hierarchy, save_interactions, save_items


@dataclass
class SynthConfig:
    branching: list[int] = field(default_factory=lambda: [4, 3, 3])
    items_per_leaf: int = 30
    n_users: int = 500
    seq_len_range: tuple[int, int] = (10, 20)
    sigma: float = 0.1
    alpha: float = 0.1
    stickiness: float = 0.8
    d_in: int = 32
    level_scales: list[float] = field(default_factory=lambda: [1.0, 0.5, 0.25])
    min_item_count: int = 5
    seed: int = 0

    def __post_init__(self):
        self.seq_len_range = tuple(self.seq_len_range)
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if len(self.level_scales) < self.L:
            raise ValueError("need one level scale per hierarchy level")
        lo, hi = self.seq_len_range
        if not 1 <= lo <= hi:
            raise ValueError("bad seq_len_range")

    @property
    def L(self) -> int:
        return len(self.branching)

    @property
    def n_leaves(self) -> int:
        return int(np.prod(self.branching))

    @property
    def n_items(self) -> int:
        return self.n_leaves * self.items_per_leaf

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seq_len_range"] = list(self.seq_len_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


def _tag_name(path: tuple[int, ...]) -> str:
    return "cat " + ".".join(str(p) for p in path)


def gen_catalog(cfg: SynthConfig):
    """Returns ``(catalog, hierarchy)``; item ids are zero-padded so string order is numeric order."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d_in
    prefixes = [list(itertools.product(*[range(b) for b in cfg.branching[: l + 1]])) for l in range(cfg.L)]
    centers: dict[tuple, np.ndarray] = {(): np.zeros(d)}
    for l, paths in enumerate(prefixes):
        for p in paths:
            centers[p] = centers[p[:-1]] + rng.normal(0.0, cfg.level_scales[l] / np.sqrt(d), size=d)
    index = [{p: i for i, p in enumerate(paths)} for paths in prefixes]
    vocab = [[_tag_name(p) for p in paths] for paths in prefixes]
    tag_embed = [np.stack([centers[p] for p in paths]).astype(np.float32) for paths in prefixes]
    hierarchy = TagHierarchy(vocab, tag_embed)

    width = len(str(cfg.n_items - 1))
    catalog = {}
    n = 0
    for leaf in prefixes[-1]:
        tags = tuple(index[l][leaf[: l + 1]] for l in range(cfg.L))
        path_text = " / ".join(_tag_name(leaf[: l + 1]) for l in range(cfg.L))
        for _ in range(cfg.items_per_leaf):
            item_id = f"i{n:0{width}d}"
            feat = centers[leaf] + rng.normal(0.0, cfg.sigma / np.sqrt(d), size=d)
            catalog[item_id] = Item(item_id, f"{item_id}: {path_text}", feat.astype(np.float32), tags)
            n += 1
    return catalog, hierarchy


def gen_interactions(catalog, cfg: SynthConfig) -> InteractionLog:
    """Sticky leaf-preference walks; every sequence length is drawn from ``seq_len_range``.

    Afterwards under-used items take over occurrences of over-used ones
    (same leaf first) until every item appears at least ``min_item_count`` times.
    """
    if not catalog:
        raise ValueError("empty catalog")
    rng = np.random.default_rng(cfg.seed + 7919)
    by_leaf: dict[tuple, list[str]] = {}
    for item in catalog.values():
        by_leaf.setdefault(item.tags, []).append(item.item_id)
    leaves = sorted(by_leaf)
    leaf_of = {i: leaf for leaf, items in by_leaf.items() for i in items}
    width = len(str(cfg.n_users - 1))
    lo, hi = cfg.seq_len_range
    seqs: dict[str, list[str]] = {}
    for u in range(cfg.n_users):
        pref = rng.dirichlet(np.full(len(leaves), cfg.alpha))
        length = int(rng.integers(lo, hi + 1))
        leaf = int(rng.choice(len(leaves), p=pref))
        seq = []
        for t in range(length):
            if t > 0 and rng.random() >= cfg.stickiness:
                leaf = int(rng.choice(len(leaves), p=pref))
            pool = by_leaf[leaves[leaf]]
            seq.append(pool[int(rng.integers(len(pool)))])
        seqs[f"u{u:0{width}d}"] = seq
    _rebalance(seqs, leaf_of, cfg.min_item_count, rng)
    return InteractionLog(seqs)


def _rebalance(seqs, leaf_of, threshold: int, rng) -> None:
    counts = Counter(i for s in seqs.values() for i in s)
    for item in leaf_of:
        counts.setdefault(item, 0)
    total = sum(counts.values())
    if total < threshold * len(counts):
        raise ValueError(f"{total} interactions cannot give {len(counts)} items {threshold} each")
    slots = [(u, t) for u, s in seqs.items() for t in range(len(s))]
    for item in sorted(counts, key=lambda i: (counts[i], i)):
        while counts[item] < threshold:
            order = rng.permutation(len(slots))
            pick = None
            for same_leaf in (True, False):
                for k in order:
                    u, t = slots[k]
                    other = seqs[u][t]
                    if counts[other] > threshold and (not same_leaf or leaf_of[other] == leaf_of[item]):
                        pick = (u, t)
                        break
                if pick is not None:
                    break
            u, t = pick
            counts[seqs[u][t]] -= 1
            seqs[u][t] = item
            counts[item] += 1


def write_dataset(out_dir, catalog, hierarchy, log, cfg: SynthConfig | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_items(catalog, out / "items.jsonl")
    save_interactions(log, out / "interactions.jsonl")
    save_hierarchy(hierarchy, out / "tags.json")
    if cfg is not None:
        with open(out / "synth.json", "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=1)
    return {"items": str(out / "items.jsonl"), "interactions": str(out / "interactions.jsonl"),
            "hierarchy": str(out / "tags.json")}


def generate(cfg: SynthConfig, out_dir=None):
    catalog, hierarchy = gen_catalog(cfg)
    log = gen_interactions(catalog, cfg)
    if out_dir is not None:
        write_dataset(out_dir, catalog, hierarchy, log, cfg)
    return catalog, hierarchy, log
