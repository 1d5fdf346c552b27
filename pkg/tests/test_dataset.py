import io
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coral.dataset import (
    Dataset,
    DatasetError,
    Interaction,
    ItemMeta,
    RatingMatrix,
    binarize,
    generate_synthetic,
    head_tail_split,
    item_popularity,
    kcore_filter,
    load_world,
    make_splits,
    parse_records,
    read_manifest,
    read_metas,
    save_world,
    write_manifest,
    write_metas,
    write_review_jsonl,
    zipf_counts,
)


def _rev(user, item, rating, ts):
    return json.dumps({"reviewerID": user, "asin": item, "overall": rating, "unixReviewTime": ts})


def _lines(*rows):
    return io.StringIO("\n".join(rows) + "\n")


def _ix(pairs):
    return [Interaction(u, i, 5, 0) for u, i in pairs]


@pytest.mark.parametrize("rating,label", [(1, 0), (2, 0), (3, 0), (4, 1), (5, 1)])
def test_binarize(rating, label):
    assert binarize(rating) == label


@pytest.mark.parametrize("bad", [0, 6, 3.5, -1, True])
def test_binarize_rejects(bad):
    with pytest.raises(DatasetError):
        binarize(bad)


def test_parse_keeps_latest_duplicate():
    inter, _, stats = parse_records(_lines(_rev("u", "i", 3, 10), _rev("u", "i", 5, 20)))
    assert inter == [Interaction("u", "i", 5, 20)]
    assert stats.n_duplicates == 1


def test_parse_keeps_latest_even_if_seen_first():
    inter, _, _ = parse_records(_lines(_rev("u", "i", 5, 20), _rev("u", "i", 3, 10)))
    assert inter[0].rating == 5


def test_parse_skips_out_of_range_rating():
    stream = _lines(_rev("u", "i", 7, 1), _rev("u", "j", 4, 1), _rev("v", "j", 2, 1))
    inter, _, stats = parse_records(stream)
    assert stats.n_malformed_reviews == 1
    assert len(inter) == 2


def test_parse_title_fallback_and_whitespace():
    meta = _lines(
        json.dumps({"asin": "a", "title": "  Big   Kettle ", "description": ""}),
        json.dumps({"asin": "b", "title": "x", "description": ["two", "parts"]}),
    )
    _, metas, _ = parse_records(io.StringIO(""), meta)
    assert metas == [ItemMeta("a", "Big Kettle"), ItemMeta("b", "two parts")]


def test_parse_majority_malformed_is_fatal():
    with pytest.raises(DatasetError, match="malformed"):
        parse_records(_lines("not json", "{}", _rev("u", "i", 4, 1)))


def test_parse_unreadable_stream():
    class Broken:
        def __iter__(self):
            raise OSError("disk gone")

    with pytest.raises(DatasetError, match="cannot read"):
        parse_records(Broken())


def test_kcore_cascade_example():
    assert kcore_filter(_ix([("u1", "i1"), ("u1", "i2"), ("u2", "i1")]), k=2) == []


def test_kcore_complete_bipartite_unchanged():
    inter = _ix([(f"u{a}", f"i{b}") for a in range(5) for b in range(5)])
    assert kcore_filter(inter, 5) == inter


def test_kcore_rejects_k0():
    with pytest.raises(ValueError):
        kcore_filter([], 0)


_pairs = st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8)), unique=True, max_size=60)


@given(_pairs, st.integers(1, 4))
def test_kcore_fixpoint_property(pairs, k):
    inter = _ix([(f"u{a}", f"i{b}") for a, b in pairs])
    kept = kcore_filter(inter, k)
    users = [x.user_id for x in kept]
    items = [x.item_id for x in kept]
    assert all(users.count(u) >= k for u in users)
    assert all(items.count(i) >= k for i in items)
    if k == 1:
        assert kept == inter


def test_head_tail_counts_example():
    counts = [50, 40, 10, 5, 5, 4, 3, 3, 2, 1]
    inter = [Interaction(f"u{n}", f"i{k}", 5, 0) for k, c in enumerate(counts) for n in range(c)]
    head, tail = head_tail_split(inter)
    assert head == {"i0", "i1"}
    assert len(tail) == 8


def test_head_tail_single_item():
    head, tail = head_tail_split(_ix([("u", "only")]))
    assert head == {"only"} and tail == frozenset()


def test_head_tail_tie_prefers_smaller_id():
    head, _ = head_tail_split(_ix([("u", "b"), ("u", "a")]))
    assert head == {"a"}


@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 15)), min_size=1, max_size=80))
def test_head_tail_property(pairs):
    inter = _ix([(f"u{a}", f"i{b:02d}") for a, b in pairs])
    head, tail = head_tail_split(inter)
    n_items = len({x.item_id for x in inter})
    assert len(head) == math.ceil(0.2 * n_items)
    assert head | tail == {x.item_id for x in inter} and not head & tail
    counts = dict(item_popularity(inter))
    if tail:
        assert min(counts[i] for i in head) >= max(counts[i] for i in tail)


def _tail_world(n_tail=100):
    # one head item everybody rated, so every user has training data
    users = [f"u{k:03d}" for k in range(n_tail)]
    inter = [Interaction(u, "head", 5, 0) for u in users]
    inter += [Interaction(u, f"t{k % 7}", 1 + k % 5, 0) for k, u in enumerate(users)]
    return inter, frozenset({"head"}), frozenset(f"t{k}" for k in range(7))


def test_make_splits_proportions():
    inter, head, tail = _tail_world()
    split = make_splits(inter, head, tail, seed=0)
    assert len(split.val) == len(split.test) == 15
    assert len(split.train) == 100 + 70


def test_make_splits_deterministic_and_disjoint():
    inter, head, tail = _tail_world()
    a = make_splits(inter, head, tail, seed=4)
    b = make_splits(inter, head, tail, seed=4)
    assert (a.train, a.val, a.test) == (b.train, b.val, b.test)
    keys = [{(x.user_id, x.item_id) for x in rows} for rows in (a.train, a.val, a.test)]
    assert not (keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2])
    assert all(x.item_id in tail for x in a.val + a.test)
    tail_keys = {(x.user_id, x.item_id) for x in inter if x.item_id in tail}
    assert tail_keys == {k for k in keys[0] | keys[1] | keys[2] if k[1] in tail}


def test_make_splits_drops_users_without_training():
    inter = [Interaction("lonely", "t0", 5, 0)] + [Interaction(f"u{k}", "h", 5, 0) for k in range(3)]
    for seed in range(20):
        split = make_splits(inter, frozenset({"h"}), frozenset({"t0"}), seed)
        assert all(x.user_id != "lonely" for x in split.val + split.test)


def test_make_splits_empty_tail():
    with pytest.raises(DatasetError):
        make_splits(_ix([("u", "h")]), frozenset({"h"}), frozenset(), 0)


def test_rating_matrix_unrated_is_none():
    m = RatingMatrix([Interaction("u", "i", 2, 0), Interaction("v", "j", 5, 0)])
    assert m.rating(0, 0) == 2 and m.label(0, 0) == 0
    assert m.rating(0, 1) is None and m.label(0, 1) is None
    assert m.label(1, 1) == 1


def test_manifest_and_metas_round_trip(tmp_path, small_dataset, small_world):
    split = small_dataset.split
    write_manifest(split, tmp_path / "m.jsonl")
    back = read_manifest(tmp_path / "m.jsonl", seed=split.seed)
    assert (back.train, back.val, back.test) == (split.train, split.val, split.test)
    write_metas(small_world[1], tmp_path / "items.jsonl")
    assert read_metas(tmp_path / "items.jsonl") == small_world[1]


def test_review_jsonl_round_trip(tmp_path, small_world):
    inter, metas, _ = small_world
    write_review_jsonl(inter, metas, tmp_path / "r.json", tmp_path / "m.json")
    with open(tmp_path / "r.json") as r, open(tmp_path / "m.json") as m:
        back, back_metas, stats = parse_records(r, m)
    assert back == inter and back_metas == metas
    assert stats.n_malformed_reviews == 0


def test_world_round_trip(tmp_path, small_world):
    world = small_world[2]
    save_world(world, tmp_path / "w.npz")
    back = load_world(tmp_path / "w.npz")
    assert back.user_ids == world.user_ids
    np.testing.assert_array_equal(back.item_factors, world.item_factors)
    assert back.category_of(world.item_ids[5]) == world.category_of(world.item_ids[5])


def test_zipf_counts_non_increasing():
    c = zipf_counts(200, 10_000, 0.9, 3, 500)
    assert np.all(np.diff(c) <= 0)


def test_synthetic_sign_rule_and_determinism(small_world):
    inter, metas, world = small_world
    for x in inter:
        assert binarize(x.rating) == world.true_label(x.user_id, x.item_id)
    again = generate_synthetic(3, 300, 120, latent_dim=2, n_categories=2, per_user=20, locality=20.0)
    assert again[0] == inter and again[1] == metas


def test_synthetic_exposure_follows_rank():
    inter, _, world = generate_synthetic(1, 400, 60, latent_dim=3, zipf_s=1.0)
    counts = dict(item_popularity(inter))
    seq = [counts.get(i, 0) for i in world.item_ids]
    assert all(a >= b for a, b in zip(seq, seq[1:]))


def test_dataset_build_shares_index(small_dataset):
    ds = small_dataset
    assert set(ds.matrix.item_ids) == ds.split.head_items | ds.split.tail_items
    u, i, y = ds.pairs("test")
    assert len(u) == len(ds.split.test)
    assert set(np.unique(y)) <= {0, 1}
    assert len(ds.descriptions) == ds.matrix.n_items


def test_dataset_build_empty_after_kcore():
    with pytest.raises(DatasetError):
        Dataset.build(_ix([("u", "i")]), [], seed=0)
