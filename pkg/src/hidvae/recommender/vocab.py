from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..tokenizer.ids import SemanticID

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3


@dataclass(frozen=True)
class TokenVocab:
    """Flat token space: specials first, then one disjoint block per ID position."""

    sizes: tuple[int, ...]

    @classmethod
    def from_id_map(cls, id_map: Mapping[str, SemanticID], K: list[int] | None = None) -> "TokenVocab":
        first = next(iter(id_map.values()))
        n_codes = len(first.codes)
        sizes = list(K) if K is not None else [max(s.codes[l] for s in id_map.values()) + 1 for l in range(n_codes)]
        if first.suffix is not None:
            sizes.append(max(s.suffix for s in id_map.values()) + 1)
        return cls(tuple(int(s) for s in sizes))

    @property
    def depth(self) -> int:
        return len(self.sizes)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(N_SPECIAL + int(np.sum(self.sizes[:l])) for l in range(self.depth))

    @property
    def n_tokens(self) -> int:
        return N_SPECIAL + int(np.sum(self.sizes))

    def flat(self, level: int, code: int) -> int:
        if not 0 <= code < self.sizes[level]:
            raise ValueError(f"code {code} outside level {level} (size {self.sizes[level]})")
        return self.offsets[level] + code

    def unflat(self, token: int) -> tuple[int, int]:
        if token < N_SPECIAL or token >= self.n_tokens:
            raise ValueError(f"token {token} is not a content token")
        for level in reversed(range(self.depth)):
            if token >= self.offsets[level]:
                return level, token - self.offsets[level]
        raise AssertionError("unreachable")

    def encode_id(self, sid: SemanticID) -> list[int]:
        tokens = sid.tokens
        if len(tokens) != self.depth:
            raise ValueError(f"ID {tokens} has length {len(tokens)}, vocab expects {self.depth}")
        return [self.flat(l, c) for l, c in enumerate(tokens)]

    def level_types(self) -> np.ndarray:
        """Type id per flat token: 0 for specials, ``l + 1`` for ID position ``l``."""
        types = np.zeros(self.n_tokens, dtype=np.int64)
        for l, (off, size) in enumerate(zip(self.offsets, self.sizes)):
            types[off:off + size] = l + 1
        return types


def code_tag_map(id_map: Mapping[str, SemanticID], catalog, n_levels: int) -> list[dict[int, int]]:
    """Majority tag per code, for each of the first ``n_levels`` ID positions.

    Ties go to the smaller tag index.
    """
    votes: list[dict[int, Counter]] = [defaultdict(Counter) for _ in range(n_levels)]
    for item_id, sid in id_map.items():
        tags = catalog[item_id].tags
        if tags is None:
            continue
        for l in range(min(n_levels, len(sid.codes), len(tags))):
            votes[l][sid.codes[l]][tags[l]] += 1
    out = []
    for per_code in votes:
        out.append({code: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for code, c in sorted(per_code.items())})
    return out


def tag_vectors(vocab: TokenVocab, code_tags: list[dict[int, int]], tag_embed: list[np.ndarray]) -> np.ndarray:
    """Frozen semantic vector per flat token; zeros for specials, suffixes and unmapped codes."""
    d_tag = tag_embed[0].shape[1]
    out = np.zeros((vocab.n_tokens, d_tag), dtype=np.float32)
    for l, mapping in enumerate(code_tags):
        if l >= len(vocab.sizes):
            break
        for code, tag in mapping.items():
            if code < vocab.sizes[l]:
                out[vocab.flat(l, code)] = tag_embed[l][tag]
    return out


def code_tag_names(code_tags: list[dict[int, int]], hierarchy) -> list[dict[int, str]]:
    return [{code: hierarchy.vocab[l][tag] for code, tag in m.items()} for l, m in enumerate(code_tags)]


def tag_path(codes, names: list[dict[int, str]]) -> str:
    """Human-readable coarse-to-fine path, e.g. ``"Skincare -> Serums"``."""
    codes = getattr(codes, "codes", codes)
    parts = []
    for l, mapping in enumerate(names):
        if l >= len(codes):
            break
        parts.append(mapping.get(codes[l], f"<code {codes[l]}>"))
    return " -> ".join(parts)
