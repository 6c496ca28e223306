import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hidvae.data import (
    DatasetConfig,
    DataError,
    DuplicateItemError,
    EmptyDatasetError,
    InteractionLog,
    Item,
    ParseError,
    SequenceTooShortError,
    five_core_filter,
    leave_one_out_split,
    load_interactions,
    load_items,
    save_interactions,
    save_items,
)


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def test_load_three_records(tmp_path):
    p = tmp_path / "items.jsonl"
    write_jsonl(p, [{"item_id": f"i{k}", "text": f"item {k}", "feature": [k, 0.0]} for k in range(3)])
    cat = load_items(p)
    assert list(cat) == ["i0", "i1", "i2"]
    assert cat["i2"].feature.tolist() == [2.0, 0.0]


def test_missing_item_id_names_line(tmp_path):
    p = tmp_path / "items.jsonl"
    write_jsonl(p, [{"item_id": "a", "text": "x"}, {"text": "no id"}])
    with pytest.raises(ParseError, match=":2"):
        load_items(p)


def test_duplicate_item_id(tmp_path):
    p = tmp_path / "items.jsonl"
    write_jsonl(p, [{"item_id": "a", "text": "x"}, {"item_id": "a", "text": "y"}])
    with pytest.raises(DuplicateItemError):
        load_items(p)


def test_feature_computed_by_embedder(tmp_path):
    p = tmp_path / "items.jsonl"
    write_jsonl(p, [{"item_id": "a", "text": "hello"}])
    cat = load_items(p, embedder=lambda t: np.full(4, len(t)))
    assert cat["a"].feature.tolist() == [5.0] * 4


def test_items_round_trip(tmp_path):
    cat = {"a": Item("a", "x", np.array([1.0, 2.0], dtype=np.float32), (0, 1)),
           "b": Item("b", "y", np.array([3.0, 4.0], dtype=np.float32), None)}
    save_items(cat, tmp_path / "i.jsonl")
    back = load_items(tmp_path / "i.jsonl")
    assert back["a"].tags == (0, 1) and back["b"].tags is None
    assert np.array_equal(back["b"].feature, cat["b"].feature)


def test_interactions_round_trip(tmp_path):
    log = InteractionLog({"u1": ["a", "b", "c"], "u2": ["c", "a", "b"]})
    save_interactions(log, tmp_path / "l.jsonl")
    assert load_interactions(tmp_path / "l.jsonl").sequences == log.sequences


def test_dataset_config_invariants():
    DatasetConfig(L=2, K=(2, 2))
    with pytest.raises(DataError):
        DatasetConfig(L=1, K=(4,))
    with pytest.raises(DataError):
        DatasetConfig(L=2, K=(4, 1))


def toy_catalog(ids):
    return {i: Item(i, i, np.zeros(2, dtype=np.float32)) for i in ids}


def test_five_core_unchanged_when_dense():
    seqs = {f"u{u}": [f"i{j}" for j in range(5)] for u in range(5)}
    log, cat = five_core_filter(InteractionLog(seqs), toy_catalog([f"i{j}" for j in range(5)]), 5)
    assert log.sequences == seqs and len(cat) == 5


def test_five_core_cascade():
    # u2 holds the only interaction with "rare"; dropping it leaves u2 at 4,
    # which then removes u2 and pushes a..d down to 2 interactions.
    seqs = {
        "u0": ["a", "b", "c", "d", "e"],
        "u1": ["a", "b", "c", "d", "e"],
        "u2": ["a", "b", "c", "d", "rare"],
    }
    cat = toy_catalog(list("abcde") + ["rare"])
    with pytest.raises(EmptyDatasetError):
        five_core_filter(InteractionLog(seqs), cat, 5)
    log, cat2 = five_core_filter(InteractionLog(seqs), cat, 2)
    assert "rare" not in cat2 and "u2" in log.sequences
    assert log.sequences["u2"] == ["a", "b", "c", "d"]
    log3, cat3 = five_core_filter(InteractionLog(seqs), cat, 3)
    assert set(log3.sequences) == {"u0", "u1", "u2"}
    assert "rare" not in cat3


def test_five_core_cascade_removes_user():
    # "x" has a single interaction; removing it drops u2 to 4 items, below 5
    seqs = {f"u{u}": list("abcde") for u in range(5)}
    seqs["u5"] = ["a", "b", "c", "d", "x"]
    log, cat = five_core_filter(InteractionLog(seqs), toy_catalog(list("abcdex")), 5)
    assert "u5" not in log.sequences and "x" not in cat
    assert set(cat) == set("abcde")


def test_threshold_one_is_vacuous():
    seqs = {"u": ["a", "b"], "v": ["c"]}
    log, cat = five_core_filter(InteractionLog(seqs), toy_catalog("abc"), 1)
    assert log.sequences == seqs and set(cat) == set("abc")


@st.composite
def random_logs(draw):
    n_items = draw(st.integers(3, 12))
    items = [f"i{j}" for j in range(n_items)]
    n_users = draw(st.integers(1, 15))
    seqs = {f"u{u}": draw(st.lists(st.sampled_from(items), min_size=1, max_size=12)) for u in range(n_users)}
    return InteractionLog(seqs), toy_catalog(items), draw(st.integers(1, 4))


@settings(max_examples=60, deadline=None)
@given(random_logs())
def test_five_core_idempotent_and_degrees(case):
    log, cat, t = case
    try:
        once_log, once_cat = five_core_filter(log, cat, t)
    except EmptyDatasetError:
        return
    twice_log, twice_cat = five_core_filter(once_log, once_cat, t)
    assert twice_log.sequences == once_log.sequences and set(twice_cat) == set(once_cat)
    assert all(len(s) >= t for s in once_log.sequences.values())
    assert all(c >= t for c in once_log.item_counts().values())


def test_leave_one_out_protocol():
    split = leave_one_out_split(InteractionLog({"u": list("abcd"), "v": list("abc")}))
    assert split.train["u"] == ["a", "b"] and split.valid["u"] == "c" and split.test["u"] == "d"
    assert split.train["v"] == ["a"] and split.valid["v"] == "b" and split.test["v"] == "c"
    assert split.history("u", "test") == ["a", "b", "c"]
    assert split.history("u", "valid") == ["a", "b"]


def test_leave_one_out_too_short():
    with pytest.raises(SequenceTooShortError, match="'w'"):
        leave_one_out_split(InteractionLog({"w": ["a", "b"]}))


@given(st.dictionaries(st.text("uv", min_size=1, max_size=3), st.lists(st.sampled_from("abcdef"), min_size=3,
                                                                         max_size=10), min_size=1))
def test_leave_one_out_partitions(seqs):
    split = leave_one_out_split(InteractionLog(seqs))
    for u, seq in seqs.items():
        assert len(split.train[u]) + 2 == len(seq)
        assert split.train[u] + [split.valid[u], split.test[u]] == seq
