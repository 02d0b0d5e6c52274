import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_dictionary, seeds, table_encoder, unit
from descdet import descriptors as ds
from descdet.errors import (
    DimMismatchError,
    EmptySeedError,
    FormatError,
    IndexOutOfRangeError,
    UnknownCategoryError,
)


def one_category(counts, dim=None):
    dim = dim or max(2, len(counts))
    table = {f"p{i}": np.eye(dim)[i] for i in range(len(counts))}
    d = ds.init_dictionary(["c"], {"c": list(table)}, table_encoder(table))
    for i, n in enumerate(counts):
        d["c"].descriptors[i].usage_count = n
    return d


def test_init_counts_and_dedupe():
    enc = table_encoder({"whiskers": [1, 0], "fur": [0, 2]})
    d = ds.init_dictionary(["cat"], {"cat": ["whiskers", "fur"]}, enc)
    assert d["cat"].texts == ["whiskers", "fur"]
    assert all(x.usage_count == 0 for x in d["cat"].descriptors)
    np.testing.assert_allclose(d["cat"].descriptors[1].embedding, [0, 1])

    d = ds.init_dictionary(["cat"], {"cat": ["fur", "Fur "]}, enc)
    assert d["cat"].texts == ["fur"]

    with pytest.raises(EmptySeedError):
        ds.init_dictionary(["cat"], {"cat": []}, enc)


def test_unknown_category_lists_known(cat_dog):
    with pytest.raises(UnknownCategoryError, match="known: cat, dog"):
        cat_dog["fox"]


def test_record_usage(cat_dog):
    d = one_category([0, 0, 0])
    ds.record_usage(d, "c", [0, 2])
    assert [x.usage_count for x in d["c"].descriptors] == [1, 0, 1]
    ds.record_usage(d, "c", [])
    assert [x.usage_count for x in d["c"].descriptors] == [1, 0, 1]
    for _ in range(5):
        ds.record_usage(d, "c", [0])
    assert d["c"].descriptors[0].usage_count == 6
    with pytest.raises(IndexOutOfRangeError):
        ds.record_usage(d, "c", [3])


def test_record_confusion():
    d = ds.init_dictionary(
        ["cat", "dog", "fox"], {"cat": ["a"], "dog": ["b"], "fox": ["c"]}, table_encoder({"a": [1, 0], "b": [0, 1], "c": [1, 1]})
    )
    ds.record_confusion(d, "cat", "cat")
    assert d["cat"].predictions_total == 1 and d["cat"].confusion_counts == {}
    for pred in ("dog", "dog", "fox"):
        ds.record_confusion(d, "cat", pred)
    assert d["cat"].confusion_counts == {"dog": 2, "fox": 1}
    assert d["cat"].misclassified_total == 3


@given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("abcd")), max_size=40))
def test_misclassified_equals_confusion_sum(pairs):
    enc = table_encoder({x: [1.0, i] for i, x in enumerate("abcd")})
    d = ds.init_dictionary(list("abcd"), {x: [x] for x in "abcd"}, enc)
    for t, p in pairs:
        ds.record_confusion(d, t, p)
    for e in d.entries.values():
        assert e.misclassified_total == sum(e.confusion_counts.values())


def test_prune_examples():
    d = one_category([10, 1, 9])
    assert ds.prune_low_frequency(d, "c", rho=0.5, floor=1) == ["p1"]
    assert d["c"].texts == ["p0", "p2"]

    d = one_category([0, 0, 0])
    assert ds.prune_low_frequency(d, "c", rho=0.5, floor=1) == []

    d = one_category([10, 1])
    assert ds.prune_low_frequency(d, "c", rho=0.5, floor=2) == []


def test_prune_protects_young_descriptors():
    d = one_category([10, 0, 0])
    d["c"].descriptors[2].created_at_cycle = 3
    assert ds.prune_low_frequency(d, "c", rho=0.5, floor=1, cycle=3, protect_cycles=1) == ["p1"]
    assert ds.prune_low_frequency(d, "c", rho=0.5, floor=1, cycle=4, protect_cycles=1) == ["p2"]


@given(st.lists(st.integers(0, 50), min_size=1, max_size=8), st.floats(0.01, 0.99), st.integers(1, 5))
def test_prune_respects_floor(counts, rho, floor):
    d = one_category(counts)
    k = len(counts)
    removed = ds.prune_low_frequency(d, "c", rho=rho, floor=floor)
    assert len(d["c"].descriptors) >= min(floor, k)
    assert len(removed) + len(d["c"].descriptors) == k
    top = max(counts)
    for x in d["c"].descriptors:
        if x.usage_count < rho * top:
            # only the floor can keep a sub-threshold descriptor
            assert sum(c > x.usage_count for c in counts) < floor


def test_merge_examples():
    enc = table_encoder({"a": [1, 0], "b": [0, 1]})
    d = ds.init_dictionary(["c"], {"c": ["a"]}, enc)

    out = ds.merge_descriptor(d, "c", "alias", [1, 0], cycle=1)
    assert out.merged and out.index == 0
    np.testing.assert_allclose(d["c"].descriptors[0].embedding, [1, 0], atol=1e-9)

    out = ds.merge_descriptor(d, "c", "b", [0, 1], cycle=1)
    assert not out.merged and len(d["c"].descriptors) == 2
    assert d["c"].descriptors[1].created_at_cycle == 1

    d = ds.init_dictionary(["c"], {"c": ["a"]}, table_encoder({"a": [0, 1]}))
    out = ds.merge_descriptor(d, "c", "a", [1, 0], cycle=1)
    assert out.merged
    np.testing.assert_allclose(d["c"].descriptors[0].embedding, [0.70710678, 0.70710678], atol=1e-6)


def test_merge_keeps_incumbent_text():
    d = ds.init_dictionary(["c"], {"c": ["red fur"]}, table_encoder({"red fur": [1, 0.01]}))
    ds.merge_descriptor(d, "c", "reddish fur", [1, 0], cycle=2)
    assert d["c"].texts == ["red fur"]


def test_merge_scope_global_reaches_other_categories(cat_dog):
    cat_dog.merge_scope = "global"
    out = ds.merge_descriptor(cat_dog, "cat", "barking", [0, 0, 1, 0.01], cycle=1)
    assert out.merged and out.category == "dog"
    assert len(cat_dog["cat"].descriptors) == 2


@settings(max_examples=60)
@given(seeds, st.integers(2, 6), st.lists(st.text("abc", min_size=1, max_size=3), min_size=1, max_size=8))
def test_merge_invariants(seed, dim, phrases):
    rng = np.random.default_rng(seed)
    d = random_dictionary(rng, 2, 4, dim)
    for p in phrases:
        before = len(d["c0"].descriptors)
        out = ds.merge_descriptor(d, "c0", p, rng.standard_normal(dim), cycle=1)
        assert len(d["c0"].descriptors) == before + (0 if out.merged else 1)
        for x in d["c0"].descriptors:
            assert abs(np.linalg.norm(x.embedding) - 1.0) < 1e-6


def test_merge_rejects_wrong_dim(cat_dog):
    with pytest.raises(DimMismatchError):
        ds.merge_descriptor(cat_dog, "cat", "x", [1, 0], cycle=0)


def test_confusing_categories():
    enc = table_encoder({x: [1.0, i] for i, x in enumerate(["p", "q", "r", "s", "t"])})
    d = ds.init_dictionary(["cat", "dog", "fox", "car", "a"], {c: [p] for c, p in zip(["cat", "dog", "fox", "car", "a"], "pqrst")}, enc)
    d["cat"].confusion_counts = {"dog": 5, "fox": 2, "car": 0}
    assert ds.confusing_categories(d, "cat", k=2, min_count=1) == ["dog", "fox"]
    d["cat"].confusion_counts = {}
    assert ds.confusing_categories(d, "cat", k=2, min_count=0) == []
    d["cat"].confusion_counts = {"fox": 3, "dog": 3}
    assert ds.confusing_categories(d, "cat", k=1, min_count=1) == ["dog"]


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    d = random_dictionary(rng, 3, 4, 5)
    ds.record_usage(d, "c1", [0])
    ds.record_confusion(d, "c1", "c2")
    d.cycle = 2
    ds.save(d, tmp_path / "d.json")
    back = ds.load(tmp_path / "d.json")
    assert d.allclose(back, atol=0.0)
    ds.save(back, tmp_path / "again.json")
    assert (tmp_path / "d.json").read_bytes() == (tmp_path / "again.json").read_bytes()


def test_load_errors(tmp_path, cat_dog):
    path = tmp_path / "d.json"
    ds.save(cat_dog, path)
    text = path.read_text()

    path.write_text(text[: len(text) // 2])
    with pytest.raises(FormatError, match="line"):
        ds.load(path)

    doc = json.loads(text)
    del doc["categories"][1]["descriptors"][0]["usage"]
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match=r"categories\[1\]\.descriptors\[0\]"):
        ds.load(path)

    ds.save(cat_dog, path)
    with pytest.raises(DimMismatchError):
        ds.load(path, expected_dim=16)


def test_seeded_operations_are_byte_identical(tmp_path):
    def build(out):
        rng = np.random.default_rng(11)
        d = random_dictionary(rng, 3, 5, 6)
        for step in range(30):
            c = f"c{step % 3}"
            ds.record_usage(d, c, [0])
            ds.merge_descriptor(d, c, f"new {step % 7}", rng.standard_normal(6), cycle=step // 10)
        ds.prune_low_frequency(d, "c0", 0.3, 1)
        ds.save(d, out)
        return out.read_bytes()

    assert build(tmp_path / "a.json") == build(tmp_path / "b.json")
