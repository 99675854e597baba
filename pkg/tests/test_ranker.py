import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_rank, hand_metrics
from textrec.corpus import DataError, Example
from textrec.ranker import (CatalogEmbeddings, full_rank, hit_at_k, mrr_at_k, ndcg_at_k, rank_users, read_embeddings,
                            read_rankings, recall_at_k, report_from_ranks, target_rank, write_embeddings,
                            write_rankings, write_report, UserRanking)


def catalog_of(ids, scores):
    # 1-d embeddings make the score of item i exactly scores[i] for user [1.0]
    return CatalogEmbeddings(list(ids), np.asarray(scores, dtype=np.float64)[:, None])


def test_full_rank_order():
    cat = catalog_of(["a", "b", "c"], [0.9, 0.1, 0.5])
    res = full_rank([1.0], cat, target="b")
    assert res.ranked == ["a", "c", "b"] and res.rank_of_target == 3


def test_ties_broken_by_item_id():
    cat = catalog_of(["z", "m", "a"], [1.0, 1.0, 1.0])
    assert full_rank([1.0], cat).ranked == ["a", "m", "z"]


def test_exclusion_keeps_target():
    cat = catalog_of(["a", "b", "c"], [0.9, 0.8, 0.1])
    assert full_rank([1.0], cat, target="a", exclude=["a", "b"]).ranked == ["a", "c", "b"]


def test_full_rank_errors():
    cat = catalog_of(["a", "b"], [0.1, 0.2])
    with pytest.raises(DataError):
        full_rank([1.0], cat, target="q")
    with pytest.raises(ValueError):
        full_rank([1.0, 2.0], cat)
    with pytest.raises(ValueError):
        CatalogEmbeddings(["a"], np.array([[np.nan]]))


@given(st.lists(st.integers(0, 5), min_size=50, max_size=50), st.integers(0, 49))
def test_target_rank_matches_brute_force(raw, t):
    ids = [f"i{k:02d}" for k in np.random.default_rng(len(raw)).permutation(50)]
    scores = np.array(raw, dtype=np.float64) / 4
    cat = catalog_of(ids, scores)
    assert target_rank(scores, cat.id_rank, t) == brute_rank(list(scores), ids, ids[t])
    assert full_rank([1.0], cat, target=ids[t]).rank_of_target == brute_rank(list(scores), ids, ids[t])


def test_metric_values():
    assert recall_at_k(3, 10) == hit_at_k(3, 10) == 1.0
    assert recall_at_k(11, 10) == 0.0
    assert ndcg_at_k(1, 10) == 1.0
    assert ndcg_at_k(3, 10) == 0.5
    assert mrr_at_k(4, 10) == 0.25
    assert mrr_at_k(11, 10) == ndcg_at_k(11, 10) == 0.0
    for fn in (recall_at_k, ndcg_at_k, mrr_at_k, hit_at_k):
        with pytest.raises(ValueError):
            fn(0, 10)
        with pytest.raises(ValueError):
            fn(1, 0)


@given(st.integers(1, 2000), st.integers(1, 100))
def test_metrics_equal_hand(rank, k):
    h = hand_metrics(rank, k)
    assert recall_at_k(rank, k) == h["recall"] and hit_at_k(rank, k) == h["hit"]
    assert ndcg_at_k(rank, k) == h["ndcg"] and mrr_at_k(rank, k) == h["mrr"]


def test_report_averages():
    rep = report_from_ranks([1, 3, 30], ks=(10,))
    assert rep.num_users == 3
    assert rep.metrics["Recall@10"] == pytest.approx(2 / 3)
    assert rep.metrics["NDCG@10"] == pytest.approx((1 + 0.5) / 3)
    assert rep.metrics["MRR@10"] == pytest.approx((1 + 1 / 3) / 3)
    assert report_from_ranks([], ks=(10,)).num_users == 0


@given(st.lists(st.integers(1, 100), min_size=1, max_size=40), st.randoms())
def test_report_order_invariant(ranks, rnd):
    shuffled = list(ranks)
    rnd.shuffle(shuffled)
    assert report_from_ranks(ranks).metrics == report_from_ranks(shuffled).metrics


def test_random_embeddings_recall_near_chance():
    rng = np.random.default_rng(0)
    n_items, n_users = 100, 2000
    cat = CatalogEmbeddings([f"{i:03d}" for i in range(n_items)], rng.normal(size=(n_items, 16)))
    users = rng.normal(size=(n_users, 16))
    examples = [Example(f"u{u}", (), f"{rng.integers(n_items):03d}") for u in range(n_users)]
    rep = rank_users(examples, users, cat, ks=(10,), top_k=0).report
    assert abs(rep.metrics["Recall@10"] - 0.10) <= 0.05


def test_scale_invariance():
    rng = np.random.default_rng(1)
    cat = CatalogEmbeddings([str(i) for i in range(30)], rng.normal(size=(30, 4)))
    u = rng.normal(size=(1, 4))
    ex = [Example("u", (), "7")]
    a = rank_users(ex, u, cat).rankings[0]
    b = rank_users(ex, 3.5 * u, cat).rankings[0]
    assert a.rank == b.rank and a.top == b.top


def test_mask_history_option():
    cat = catalog_of(["a", "b", "c", "d"], [4.0, 3.0, 2.0, 1.0])
    ex = [Example("u", ("a", "b", "d"), "d")]
    assert rank_users(ex, np.ones((1, 1)), cat).rankings[0].rank == 4
    assert rank_users(ex, np.ones((1, 1)), cat, mask_history=True).rankings[0].rank == 2


def test_embeddings_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    m = rng.normal(size=(4, 3))
    write_embeddings(tmp_path / "e.txt", ["a", "b", "c", "d"], m, ["popular", "other", "other", "popular"])
    ids, back, labels = read_embeddings(tmp_path / "e.txt")
    assert ids == ["a", "b", "c", "d"] and np.array_equal(back, m)
    assert labels == ["popular", "other", "other", "popular"]
    assert (tmp_path / "e.txt").read_text().splitlines()[0] == "4 3"


def test_rankings_and_report_files(tmp_path):
    rows = [UserRanking("u1", "a", 2, ["b", "a"]), UserRanking("u2", "c", 1, ["c"])]
    write_rankings(tmp_path / "r.jsonl", rows)
    assert read_rankings(tmp_path / "r.jsonl") == rows
    write_report(tmp_path / "m.json", report_from_ranks([2, 1], ks=(1,)), "abcd", {"seed": "1"})
    import json
    obj = json.loads((tmp_path / "m.json").read_text())
    assert obj["metrics"]["Recall@1"] == 0.5 and obj["checkpoint"] == "abcd" and obj["num_users"] == 2
