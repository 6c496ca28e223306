"""Retrieval-then-classification tagging for items without a category path.

For each level the tag pool is narrowed to the ``k`` tags whose embeddings are
closest (cosine) to the item embedding; a classifier then picks one of them,
seeing the item text and the tags already chosen for coarser levels.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .data import Item, TagHierarchy

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "You are a category expert specializing in hierarchical classification. \n"
    'Given the item description: "{item_text}", and the previous hierarchical tags: {prev_tags}, '
    "please select the single best matching tag for the next level from the following candidate list: {candidates}. \n"
    "Reason step-by-step if needed, but output only the selected tag in plain text, "
    "without any additional explanation or formatting."
)

DEFAULT_K_RETRIEVE = 10


class Embedder(Protocol):
    name: str

    def embed(self, text: str) -> np.ndarray: ...


class TagClassifier(Protocol):
    def classify(self, item_text: str, prior_tags: list[str], candidates: list[str]) -> str: ...


class ClassifierError(RuntimeError):
    """Transport-level failure talking to a classifier backend; safe to retry."""

    retryable = True


class TagGenerationError(RuntimeError):
    def __init__(self, item_id: str, level: int, cause: Exception):
        super().__init__(f"item {item_id!r}, level {level}: {cause}")
        self.item_id = item_id
        self.level = level
        self.retryable = getattr(cause, "retryable", False)


_TOKEN = re.compile(r"[a-z0-9]+")


class HashingEmbedder:
    """Deterministic bag-of-words embedder (signed feature hashing, L2-normalised).

    Offline stand-in for a sentence encoder; shares no state between calls.
    """

    def __init__(self, dim: int = 768):
        self.dim = dim
        self.name = f"hashing-{dim}"

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        tokens = _TOKEN.findall(text.lower())
        grams = tokens + [a + "_" + b for a, b in zip(tokens, tokens[1:])]
        for g in grams:
            h = hashlib.blake2b(g.encode(), digest_size=8).digest()
            idx = int.from_bytes(h[:4], "little") % self.dim
            vec[idx] += 1.0 if h[4] & 1 else -1.0
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec.astype(np.float32)

    __call__ = embed


class SentenceTransformerEmbedder:
    """Adapter over ``sentence-transformers``; imported lazily."""

    def __init__(self, model_name: str = "all-mpnet-base-v2"):
        from sentence_transformers import SentenceTransformer

        self._model = SentenceTransformer(model_name)
        self.name = model_name

    def embed(self, text: str) -> np.ndarray:
        return np.asarray(self._model.encode(text, normalize_embeddings=True), dtype=np.float32)

    __call__ = embed


class MockClassifier:
    """Picks the candidate whose embedding is nearest (cosine) to the item's.

    Ties go to the earlier candidate, so with retrieval order this is the top-1
    retrieved tag.
    """

    def __init__(self, embed_text: Callable[[str], np.ndarray], embed_tag: Callable[[str], np.ndarray]):
        self.embed_text = embed_text
        self.embed_tag = embed_tag

    def classify(self, item_text, prior_tags, candidates):
        v = self.embed_text(item_text)
        sims = [_cosine(v, self.embed_tag(c)) for c in candidates]
        return candidates[int(np.argmax(sims))]


class ChatCompletionClassifier:
    """Minimal client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(self, url: str, model: str, api_key: str | None = None, timeout: float = 60.0):
        self.url = url
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    def classify(self, item_text, prior_tags, candidates):
        body = {
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": build_prompt(item_text, prior_tags, candidates)}],
        }
        req = urllib.request.Request(self.url, data=json.dumps(body).encode(), method="POST")
        req.add_header("Content-Type", "application/json")
        if self.api_key:
            req.add_header("Authorization", f"Bearer {self.api_key}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.load(resp)
        except OSError as exc:
            raise ClassifierError(str(exc)) from exc
        return parse_reply(payload["choices"][0]["message"]["content"])


def parse_reply(text: str) -> str:
    return text.strip().strip("\"'`").strip()


def _cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-8))


@dataclass
class CandidateSet:
    level: int
    tags: list[tuple[str, float]]

    @property
    def names(self) -> list[str]:
        return [t for t, _ in self.tags]


@dataclass
class FallbackLog:
    """Records classifier answers that fell outside the candidate set."""

    events: list[dict] = field(default_factory=list)

    def record(self, item_id: str, level: int, answer: str, used: str) -> None:
        self.events.append({"item_id": item_id, "level": level, "answer": answer, "used": used})

    def to_json(self) -> dict:
        return {"fallback_count": len(self.events), "events": self.events}


def retrieve_candidates(item_vec, hierarchy: TagHierarchy, level: int, k: int) -> CandidateSet:
    if k < 1:
        raise ValueError("k must be >= 1")
    emb = np.asarray(hierarchy.tag_embed[level], dtype=np.float64)
    v = np.asarray(item_vec, dtype=np.float64)
    if v.shape != (emb.shape[1],):
        raise ValueError(f"item vector has shape {v.shape}, tag embeddings have dim {emb.shape[1]}")
    norms = np.maximum(np.linalg.norm(emb, axis=1) * np.linalg.norm(v), 1e-8)
    sims = emb @ v / norms
    # lexsort: last key is primary -> descending similarity, then ascending index
    order = np.lexsort((np.arange(len(sims)), -sims))[:k]
    names = hierarchy.vocab[level]
    return CandidateSet(level, [(names[i], float(sims[i])) for i in order])


def classify_level(item: Item, prior: list[str], cands: CandidateSet, clf: TagClassifier,
                   hierarchy: TagHierarchy, fallback_log: FallbackLog | None = None) -> tuple[str, int]:
    if not cands.tags:
        raise ValueError("empty candidate set")
    names = cands.names
    if len(names) == 1:
        chosen = names[0]
    else:
        try:
            answer = clf.classify(item.text, list(prior), names)
        except ClassifierError as exc:
            raise TagGenerationError(item.item_id, cands.level, exc) from exc
        if answer in names:
            chosen = answer
        else:
            chosen = names[0]
            log.warning("item %s level %d: classifier answered %r, outside candidates", item.item_id, cands.level, answer)
            if fallback_log is not None:
                fallback_log.record(item.item_id, cands.level, answer, chosen)
    return chosen, hierarchy.index_of(cands.level, chosen)


def generate_hierarchy(item: Item, hierarchy: TagHierarchy, k: int, clf: TagClassifier,
                       item_vec=None, embedder: Embedder | None = None,
                       fallback_log: FallbackLog | None = None) -> list[int]:
    """Tag ``item`` level by level; returns one tag index per level, coarse to fine."""
    if not item.text:
        raise ValueError(f"item {item.item_id!r} has empty text")
    if item_vec is None:
        if embedder is None:
            raise ValueError("need item_vec or an embedder")
        item_vec = embedder.embed(item.text)
    prior: list[str] = []
    out: list[int] = []
    for level in range(hierarchy.levels):
        cands = retrieve_candidates(item_vec, hierarchy, level, k)
        try:
            tag, idx = classify_level(item, prior, cands, clf, hierarchy, fallback_log)
        except TagGenerationError:
            raise
        except Exception as exc:
            raise TagGenerationError(item.item_id, level, exc) from exc
        prior.append(tag)
        out.append(idx)
    return out


def tag_catalog(catalog, hierarchy: TagHierarchy, clf: TagClassifier, k: int = DEFAULT_K_RETRIEVE,
                item_vec: Callable[[Item], np.ndarray] | None = None, embedder: Embedder | None = None):
    """Fill in tags for every item lacking them. Returns ``(catalog, FallbackLog)``."""
    fallback = FallbackLog()
    out = {}
    for item_id, item in catalog.items():
        if item.tags is not None:
            out[item_id] = item
            continue
        vec = item_vec(item) if item_vec is not None else None
        tags = generate_hierarchy(item, hierarchy, k, clf, item_vec=vec, embedder=embedder, fallback_log=fallback)
        out[item_id] = item.with_tags(tags)
    return out, fallback


def mock_setup(catalog, hierarchy: TagHierarchy, embedder: Embedder):
    """Mock classifier and item-vector function sharing the hierarchy's embedding space.

    An item's own feature is used when it already lives in that space (as with
    synthetic data, whose tag embeddings are category centers); otherwise its
    text is embedded. Tag strings resolve to the hierarchy's stored vectors.
    """
    d_tag = hierarchy.d_tag

    def item_vec(item: Item) -> np.ndarray:
        if item.feature is not None and item.feature.shape == (d_tag,):
            return item.feature
        v = embedder.embed(item.text)
        if v.shape != (d_tag,):
            raise ValueError(f"embedder gives dim {v.shape[0]} but tag embeddings have dim {d_tag}; "
                             "use an embedder matching the hierarchy")
        return v

    by_text = {it.text: item_vec(it) for it in catalog.values() if it.tags is None}
    by_tag = {name: hierarchy.tag_embed[l][i] for l, names in enumerate(hierarchy.vocab)
              for i, name in enumerate(names)}
    clf = MockClassifier(lambda t: by_text[t] if t in by_text else embedder.embed(t), by_tag.__getitem__)
    return clf, item_vec


def build_prompt(item_text: str, prior_tags: Sequence[str], candidates: Sequence[str]) -> str:
    return PROMPT_TEMPLATE.format(
        item_text=item_text,
        prev_tags=json.dumps(list(prior_tags), ensure_ascii=False),
        candidates=json.dumps(list(candidates), ensure_ascii=False),
    )
