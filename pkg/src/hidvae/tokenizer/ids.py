"""Item -> semantic ID assignment and the ``ids.tsv`` format."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..data import feature_matrix

COLLISION_MODES = ("report", "tiger-append")


@dataclass(frozen=True, order=True)
class SemanticID:
    codes: tuple[int, ...]
    suffix: int | None = None

    @property
    def tokens(self) -> tuple[int, ...]:
        """Code tuple plus the suffix when present; what the recommender decodes."""
        return self.codes if self.suffix is None else self.codes + (self.suffix,)


def collision_groups(id_map: Mapping[str, SemanticID]) -> list[dict]:
    by_code: dict[tuple, list[str]] = defaultdict(list)
    for item_id, sid in id_map.items():
        by_code[sid.codes].append(item_id)
    groups = [{"codes": list(code), "items": sorted(items)} for code, items in by_code.items() if len(items) > 1]
    groups.sort(key=lambda g: g["codes"])
    return groups


def assign_ids(catalog, state, collision_mode: str = "report"):
    """Map every item to its code tuple.

    Returns ``(id_map, report)``. In ``tiger-append`` mode members of a
    collision group receive suffixes 0, 1, ... in ascending item_id order and
    singletons get 0.
    """
    if collision_mode not in COLLISION_MODES:
        raise ValueError(f"collision_mode must be one of {COLLISION_MODES}")
    ids = list(catalog)
    codes = state.codes(feature_matrix(catalog, state.config.d_in)) if ids else np.zeros((0, state.config.L), int)
    raw = {item_id: tuple(int(c) for c in row) for item_id, row in zip(ids, codes)}
    return ids_from_codes(raw, collision_mode)


def ids_from_codes(raw: Mapping[str, tuple[int, ...]], collision_mode: str = "report"):
    id_map = {item_id: SemanticID(code) for item_id, code in raw.items()}
    groups = collision_groups(id_map)
    n_colliding = sum(len(g["items"]) for g in groups)
    if collision_mode == "tiger-append":
        suffix = {item_id: 0 for item_id in id_map}
        for g in groups:
            for s, item_id in enumerate(g["items"]):
                suffix[item_id] = s
        id_map = {item_id: SemanticID(sid.codes, suffix[item_id]) for item_id, sid in id_map.items()}
    report = {
        "mode": collision_mode,
        "n_items": len(id_map),
        "n_colliding_items": n_colliding,
        "collision_rate": n_colliding / len(id_map) if id_map else 0.0,
        "groups": groups,
    }
    return id_map, report


def write_ids_tsv(id_map: Mapping[str, SemanticID], path) -> None:
    L = len(next(iter(id_map.values())).codes) if id_map else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["item_id", *[f"code_{l + 1}" for l in range(L)], "suffix"])
        for item_id, sid in id_map.items():
            w.writerow([item_id, *sid.codes, "" if sid.suffix is None else sid.suffix])


def read_ids_tsv(path) -> dict[str, SemanticID]:
    with open(path, newline="") as fh:
        r = csv.reader(fh, delimiter="\t")
        header = next(r)
        n_codes = len(header) - 2
        out = {}
        for row in r:
            codes = tuple(int(v) for v in row[1:1 + n_codes])
            suffix = row[1 + n_codes]
            out[row[0]] = SemanticID(codes, int(suffix) if suffix != "" else None)
    return out
