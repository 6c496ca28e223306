from __future__ import annotations

from collections import defaultdict
from typing import Mapping, Sequence

import torch

from ..tokenizer.ids import SemanticID

# finite stand-in for -inf so masked scores stay safe under arithmetic
NEG_INF = -1e9


class TrieError(KeyError):
    pass


class PrefixTrie:
    """All prefixes of the catalog's semantic IDs, with item lists at the leaves.

    Keys are token tuples (codes, then the suffix when IDs carry one). The
    structure is immutable once built.
    """

    def __init__(self, children: dict[tuple, tuple[int, ...]], leaves: dict[tuple, tuple[str, ...]], depth: int):
        self._children = children
        self._leaves = leaves
        self.depth = depth

    @classmethod
    def build(cls, id_map: Mapping[str, SemanticID]) -> "PrefixTrie":
        if not id_map:
            raise ValueError("cannot build a trie from an empty id map")
        children: dict[tuple, set] = defaultdict(set)
        leaves: dict[tuple, list] = defaultdict(list)
        depth = None
        for item_id, sid in id_map.items():
            tokens = sid.tokens
            if depth is None:
                depth = len(tokens)
            elif len(tokens) != depth:
                raise ValueError("all semantic IDs must have the same length")
            for i in range(depth):
                children[tokens[:i]].add(tokens[i])
            leaves[tokens].append(item_id)
        return cls(
            {p: tuple(sorted(c)) for p, c in children.items()},
            {p: tuple(sorted(items)) for p, items in leaves.items()},
            depth,
        )

    def allowed(self, prefix: Sequence[int]) -> tuple[int, ...]:
        prefix = tuple(int(p) for p in prefix)
        try:
            return self._children[prefix]
        except KeyError:
            raise TrieError(f"prefix {prefix} is not a valid ID prefix") from None

    def items(self, tokens: Sequence[int]) -> tuple[str, ...]:
        return self._leaves.get(tuple(int(t) for t in tokens), ())

    def __contains__(self, prefix) -> bool:
        prefix = tuple(prefix)
        return prefix in self._children or prefix in self._leaves

    @property
    def node_count(self) -> int:
        return len(self._children) + len(self._leaves)

    @property
    def n_ids(self) -> int:
        return len(self._leaves)

    def id_tuples(self) -> list[tuple]:
        return sorted(self._leaves)


def mask_logits(logits: torch.Tensor, trie: PrefixTrie, prefix: Sequence[int]) -> torch.Tensor:
    """Keep only the codes that extend ``prefix`` to a stored prefix.

    ``logits`` covers the code space of the next position (last dim).
    """
    allowed = trie.allowed(prefix)
    keep = torch.zeros(logits.shape[-1], dtype=torch.bool, device=logits.device)
    keep[list(allowed)] = True
    return logits.masked_fill(~keep, NEG_INF)
