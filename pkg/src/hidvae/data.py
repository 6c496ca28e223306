"""Domain types, dataset ingestion, k-core filtering and leave-one-out splits."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


class DuplicateItemError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class SequenceTooShortError(DataError):
    def __init__(self, user_id: str, length: int):
        super().__init__(f"user {user_id!r} has {length} interactions; leave-one-out needs at least 3")
        self.user_id = user_id


@dataclass(frozen=True)
class Item:
    item_id: str
    text: str
    feature: np.ndarray | None = None
    tags: tuple[int, ...] | None = None

    def with_feature(self, feature) -> "Item":
        return Item(self.item_id, self.text, np.asarray(feature, dtype=np.float32), self.tags)

    def with_tags(self, tags: Sequence[int]) -> "Item":
        return Item(self.item_id, self.text, self.feature, tuple(int(t) for t in tags))


Catalog = dict  # item_id -> Item, insertion-ordered


@dataclass
class TagHierarchy:
    vocab: list[list[str]]
    tag_embed: list[np.ndarray]

    def __post_init__(self):
        if len(self.vocab) != len(self.tag_embed):
            raise DataError("vocab and tag_embed must have one entry per level")
        for level, (names, emb) in enumerate(zip(self.vocab, self.tag_embed)):
            if not names:
                raise DataError(f"level {level} has an empty vocabulary")
            if len(set(names)) != len(names):
                raise DataError(f"level {level} has duplicate tag strings")
            if emb.shape[0] != len(names):
                raise DataError(f"level {level}: {emb.shape[0]} embeddings for {len(names)} tags")
        self._index = [{name: i for i, name in enumerate(names)} for names in self.vocab]

    @property
    def levels(self) -> int:
        return len(self.vocab)

    @property
    def sizes(self) -> list[int]:
        return [len(v) for v in self.vocab]

    @property
    def d_tag(self) -> int:
        return int(self.tag_embed[0].shape[1])

    def index_of(self, level: int, tag: str) -> int:
        return self._index[level][tag]

    def validate_tags(self, item: Item) -> None:
        if item.tags is None:
            return
        if len(item.tags) != self.levels:
            raise DataError(f"item {item.item_id!r} has {len(item.tags)} tags, hierarchy has {self.levels} levels")
        for level, t in enumerate(item.tags):
            if not 0 <= t < len(self.vocab[level]):
                raise DataError(f"item {item.item_id!r}: tag index {t} out of range at level {level}")

    def path_names(self, tags: Sequence[int]) -> list[str]:
        return [self.vocab[level][t] for level, t in enumerate(tags)]


@dataclass(frozen=True)
class DatasetConfig:
    d_in: int = 768
    L: int = 3
    K: tuple[int, ...] = (256, 256, 256)
    core_threshold: int = 5

    def __post_init__(self):
        if self.L < 2:
            raise DataError("L must be at least 2")
        if len(self.K) != self.L or any(k < 2 for k in self.K):
            raise DataError("K needs one codebook size >= 2 per level")


@dataclass
class InteractionLog:
    sequences: dict[str, list[str]]

    @property
    def users(self) -> list[str]:
        return list(self.sequences)

    def item_counts(self) -> Counter:
        return Counter(i for seq in self.sequences.values() for i in seq)

    def check_catalog(self, catalog: Mapping[str, Item]) -> None:
        for user, seq in self.sequences.items():
            for item_id in seq:
                if item_id not in catalog:
                    raise DataError(f"user {user!r} references unknown item {item_id!r}")


@dataclass
class SplitLog:
    """Per-user leave-one-out partition."""

    train: dict[str, list[str]]
    valid: dict[str, str]
    test: dict[str, str]
    users: list[str] = field(default_factory=list)

    def history(self, user: str, stage: str) -> list[str]:
        """Items visible when predicting the ``stage`` target ('valid' or 'test')."""
        if stage == "valid":
            return list(self.train[user])
        if stage == "test":
            return list(self.train[user]) + [self.valid[user]]
        raise ValueError(f"unknown stage {stage!r}")

    def target(self, user: str, stage: str) -> str:
        return self.valid[user] if stage == "valid" else self.test[user]


def _read_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise ParseError(path, lineno, "record is not an object")
            yield lineno, record


def load_items(
    path,
    format: str = "jsonl",
    embedder: Callable[[str], np.ndarray] | None = None,
) -> Catalog:
    """Read an items file into an insertion-ordered catalog.

    Records without a ``feature`` are embedded from their text with ``embedder``;
    if no embedder is given such items keep ``feature=None``.
    """
    if format != "jsonl":
        raise ValueError(f"unsupported item format {format!r}")
    path = Path(path)
    catalog: Catalog = {}
    for lineno, rec in _read_jsonl(path):
        item_id = rec.get("item_id")
        text = rec.get("text")
        if not isinstance(item_id, str) or not item_id:
            raise ParseError(path, lineno, "missing or non-string item_id")
        if not isinstance(text, str):
            raise ParseError(path, lineno, "missing or non-string text")
        if item_id in catalog:
            raise DuplicateItemError(f"{path}:{lineno}: duplicate item_id {item_id!r}")
        feature = rec.get("feature")
        if feature is not None:
            try:
                feature = np.asarray(feature, dtype=np.float32)
            except (TypeError, ValueError):
                raise ParseError(path, lineno, "feature is not a numeric list") from None
            if feature.ndim != 1:
                raise ParseError(path, lineno, "feature must be a flat list")
        elif embedder is not None:
            feature = np.asarray(embedder(text), dtype=np.float32)
        tags = rec.get("tags")
        if tags is not None:
            if not isinstance(tags, list) or not all(isinstance(t, int) for t in tags):
                raise ParseError(path, lineno, "tags must be a list of integers")
            tags = tuple(tags)
        catalog[item_id] = Item(item_id, text, feature, tags)
    return catalog


def save_items(catalog: Mapping[str, Item], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in catalog.values():
            rec: dict = {"item_id": item.item_id, "text": item.text}
            if item.feature is not None:
                rec["feature"] = [float(v) for v in item.feature]
            if item.tags is not None:
                rec["tags"] = list(item.tags)
            fh.write(json.dumps(rec) + "\n")


def load_interactions(path) -> InteractionLog:
    path = Path(path)
    sequences: dict[str, list[str]] = {}
    for lineno, rec in _read_jsonl(path):
        user = rec.get("user_id")
        items = rec.get("items")
        if not isinstance(user, str) or not user:
            raise ParseError(path, lineno, "missing or non-string user_id")
        if not isinstance(items, list) or not all(isinstance(i, str) for i in items):
            raise ParseError(path, lineno, "items must be a list of strings")
        if user in sequences:
            raise ParseError(path, lineno, f"duplicate user_id {user!r}")
        stamps = rec.get("timestamps")
        if stamps is not None:
            if len(stamps) != len(items):
                raise ParseError(path, lineno, "timestamps and items differ in length")
            # stable sort keeps file order for equal timestamps
            items = [i for _, i in sorted(zip(stamps, items), key=lambda p: p[0])]
        sequences[user] = list(items)
    return InteractionLog(sequences)


def save_interactions(log: InteractionLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user, seq in log.sequences.items():
            fh.write(json.dumps({"user_id": user, "items": list(seq)}) + "\n")


def load_hierarchy(path, embedder: Callable[[str], np.ndarray] | None = None) -> TagHierarchy:
    """Read ``tags.json``; embeddings come from ``embeddings_path`` (npz) or ``embedder``."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        spec = json.load(fh)
    vocab = [list(level) for level in spec["vocab"]]
    if spec.get("levels", len(vocab)) != len(vocab):
        raise DataError(f"{path}: 'levels' disagrees with vocab length")
    emb_path = spec.get("embeddings_path")
    if emb_path:
        emb_path = Path(emb_path)
        if not emb_path.is_absolute():
            emb_path = path.parent / emb_path
        with np.load(emb_path) as npz:
            tag_embed = [np.asarray(npz[f"level_{l}"], dtype=np.float32) for l in range(len(vocab))]
    elif embedder is not None:
        tag_embed = [np.stack([embedder(t) for t in names]).astype(np.float32) for names in vocab]
    else:
        raise DataError(f"{path}: no embeddings_path and no embedder to compute tag embeddings")
    return TagHierarchy(vocab, tag_embed)


def save_hierarchy(hierarchy: TagHierarchy, path) -> None:
    path = Path(path)
    emb_name = path.with_suffix(".npz").name
    np.savez(path.parent / emb_name, **{f"level_{l}": e for l, e in enumerate(hierarchy.tag_embed)})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"levels": hierarchy.levels, "vocab": hierarchy.vocab, "embeddings_path": emb_name}, fh, indent=1)


def five_core_filter(log: InteractionLog, catalog: Mapping[str, Item], threshold: int = 5):
    """Drop users and items with fewer than ``threshold`` interactions until nothing changes.

    Item degree counts every occurrence, so repeat interactions count.
    Returns ``(log, catalog)``; catalog keeps only items still referenced.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    seqs = {u: list(s) for u, s in log.sequences.items()}
    while True:
        counts = Counter(i for s in seqs.values() for i in s)
        weak_items = {i for i, c in counts.items() if c < threshold}
        nxt = {}
        for u, s in seqs.items():
            kept = [i for i in s if i not in weak_items]
            if len(kept) >= threshold:
                nxt[u] = kept
        if nxt == seqs:
            break
        seqs = nxt
    if not seqs:
        raise EmptyDatasetError(f"no users survive {threshold}-core filtering")
    used = {i for s in seqs.values() for i in s}
    filtered = {k: v for k, v in catalog.items() if k in used}
    return InteractionLog(seqs), filtered


def leave_one_out_split(log: InteractionLog) -> SplitLog:
    train, valid, test = {}, {}, {}
    for user, seq in log.sequences.items():
        if len(seq) < 3:
            raise SequenceTooShortError(user, len(seq))
        train[user] = list(seq[:-2])
        valid[user] = seq[-2]
        test[user] = seq[-1]
    return SplitLog(train, valid, test, users=list(log.sequences))


def feature_matrix(catalog: Mapping[str, Item], d_in: int | None = None) -> np.ndarray:
    rows = []
    for item in catalog.values():
        if item.feature is None:
            raise DataError(f"item {item.item_id!r} has no feature vector")
        if d_in is not None and item.feature.shape[0] != d_in:
            raise DataError(f"item {item.item_id!r}: feature dim {item.feature.shape[0]} != d_in {d_in}")
        rows.append(item.feature)
    return np.stack(rows).astype(np.float32)


def tag_matrix(catalog: Mapping[str, Item], levels: int) -> np.ndarray:
    rows = []
    for item in catalog.values():
        if item.tags is None or len(item.tags) != levels:
            raise DataError(f"item {item.item_id!r} lacks a full {levels}-level tag path")
        rows.append(item.tags)
    return np.asarray(rows, dtype=np.int64)
