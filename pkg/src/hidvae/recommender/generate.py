"""Trie-constrained beam search over semantic IDs."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from ..tokenizer.ids import SemanticID
from .model import SemanticIDRecommender, history_tokens, pad_batch
from .trie import NEG_INF, PrefixTrie, mask_logits
from .vocab import BOS


@dataclass(frozen=True)
class Recommendation:
    item_id: str
    logprob: float
    tokens: tuple[int, ...]


def default_beam(k: int, configured: int | None = None) -> int:
    return max(configured or 0, 2 * k)


@torch.no_grad()
def beam_search(model: SemanticIDRecommender, histories: Sequence[Sequence[SemanticID]], trie: PrefixTrie,
                beam: int) -> list[list[tuple[tuple[int, ...], float]]]:
    """Top ``beam`` complete token tuples per history, best first.

    Scores are summed per-position log-probabilities (softmax over the
    position's code block). Equal scores resolve to the smaller tuple.
    """
    if trie.n_ids == 0:
        raise ValueError("empty trie")
    if beam < 1:
        raise ValueError("beam width must be >= 1")
    vocab = model.vocab
    if trie.depth != vocab.depth:
        raise ValueError(f"trie depth {trie.depth} does not match vocab depth {vocab.depth}")
    model.eval()
    enc = pad_batch([history_tokens(h, vocab, model.config.max_history) for h in histories])
    memory, mem_pad = model.encode(enc)
    beams: list[list[tuple[tuple[int, ...], float]]] = [[((), 0.0)] for _ in histories]
    for step in range(vocab.depth):
        owners, prefixes, bases = [], [], []
        for u, bs in enumerate(beams):
            for prefix, score in bs:
                owners.append(u)
                prefixes.append(prefix)
                bases.append(score)
        dec = torch.as_tensor([[BOS] + [vocab.flat(l, c) for l, c in enumerate(p)] for p in prefixes],
                              dtype=torch.long)
        idx = torch.as_tensor(owners)
        logits = model.decode(dec, memory[idx], mem_pad[idx])[:, -1]
        lp = F.log_softmax(model.level_logits(logits, step), dim=-1)
        new: list[list] = [[] for _ in histories]
        for row, (u, prefix, base) in enumerate(zip(owners, prefixes, bases)):
            masked = mask_logits(lp[row], trie, prefix)
            for code in trie.allowed(prefix):
                score = masked[code].item()
                assert score > NEG_INF / 2
                new[u].append((prefix + (code,), base + score))
        beams = [sorted(c, key=lambda b: (-b[1], b[0]))[:beam] for c in new]
    return beams


def generate(model: SemanticIDRecommender, histories: Sequence[Sequence[SemanticID]], trie: PrefixTrie, k: int,
             beam: int | None = None, chunk: int = 128) -> list[list[Recommendation]]:
    """Ranked items per history, at most ``k`` each.

    A finished beam whose tuple is shared by several items emits them in
    ascending item_id order, each consuming a rank.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    width = beam if beam is not None else default_beam(k, model.config.beam)
    if width < k:
        raise ValueError("beam width must be >= k")
    out = []
    for start in range(0, len(histories), chunk):
        for finished in beam_search(model, histories[start:start + chunk], trie, width):
            recs: list[Recommendation] = []
            for tokens, score in finished:
                for item in trie.items(tokens):
                    if len(recs) == k:
                        break
                    recs.append(Recommendation(item, score, tokens))
                if len(recs) == k:
                    break
            out.append(recs)
    return out


def popularity_baseline(train: Mapping[str, Sequence[str]], k: int) -> list[str]:
    """The ``k`` most frequent training items; ties by ascending item_id."""
    counts = Counter(i for seq in train.values() for i in seq)
    if not counts:
        raise ValueError("empty training split")
    return [i for i, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]
