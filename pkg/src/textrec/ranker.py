"""Full-catalog ranking and single-label ranking metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import DataError, Example
from .encoder import TextMatcher, embed_batched
from .verbalize import ItemTable

DEFAULT_KS = (10, 20)
METRIC_NAMES = ("Recall", "NDCG", "MRR", "Hit")


@dataclass
class CatalogEmbeddings:
    item_ids: list[str]
    matrix: np.ndarray
    fingerprint: str = ""

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.item_ids):
            raise ValueError("one embedding row per item required")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("catalog embeddings contain non-finite values")
        self.index = {item: i for i, item in enumerate(self.item_ids)}
        # position of each item in item_id ascending order, used to break score ties
        self.id_rank = np.empty(len(self.item_ids), dtype=np.int64)
        self.id_rank[np.argsort(np.array(self.item_ids, dtype=object), kind="stable")] = np.arange(len(self.item_ids))


def encode_catalog(model: TextMatcher, items: ItemTable, fingerprint: str = "", batch_size: int = 256) -> CatalogEmbeddings:
    ids = np.arange(len(items)) if model.item_id_embedding is not None else None
    matrix = embed_batched(model, items.tokens, items.mask, ids, side="item", batch_size=batch_size)
    return CatalogEmbeddings(list(items.item_ids), matrix, fingerprint)


@dataclass
class RankingResult:
    user_id: str
    ranked: list[str]
    rank_of_target: int


def ranking_order(scores: np.ndarray, id_rank: np.ndarray) -> np.ndarray:
    """Indices by score descending, ties by item_id ascending."""
    return np.lexsort((id_rank, -scores))


def target_rank(scores: np.ndarray, id_rank: np.ndarray, t: int) -> int:
    """1-based rank of index ``t`` under :func:`ranking_order`, without sorting."""
    s = scores[t]
    return 1 + int(np.count_nonzero(scores > s)) + int(np.count_nonzero((scores == s) & (id_rank < id_rank[t])))


def full_rank(user_embedding, catalog: CatalogEmbeddings, target: str | None = None, user_id: str = "",
              exclude: Iterable[str] = ()) -> RankingResult:
    u = np.asarray(user_embedding, dtype=np.float64)
    if u.shape != (catalog.matrix.shape[1],):
        raise ValueError(f"user embedding shape {u.shape} does not match catalog dim {catalog.matrix.shape[1]}")
    scores = catalog.matrix @ u
    for item in exclude:
        if item != target and item in catalog.index:
            scores[catalog.index[item]] = -np.inf
    order = ranking_order(scores, catalog.id_rank)
    ranked = [catalog.item_ids[i] for i in order]
    rank = 0
    if target is not None:
        if target not in catalog.index:
            raise DataError(f"target {target!r} not in catalog")
        rank = ranked.index(target) + 1
    return RankingResult(user_id, ranked, rank)


def _check(rank: int, k: int):
    if rank < 1 or k < 1:
        raise ValueError(f"rank and K must be >= 1 (rank={rank}, K={k})")


def recall_at_k(rank: int, k: int) -> float:
    _check(rank, k)
    return 1.0 if rank <= k else 0.0


def hit_at_k(rank: int, k: int) -> float:
    _check(rank, k)
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    # single relevant item: ideal DCG is 1
    _check(rank, k)
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def mrr_at_k(rank: int, k: int) -> float:
    _check(rank, k)
    return 1.0 / rank if rank <= k else 0.0


_METRIC_FNS = {"Recall": recall_at_k, "NDCG": ndcg_at_k, "MRR": mrr_at_k, "Hit": hit_at_k}


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    num_users: int

    def to_dict(self) -> dict:
        return {"metrics": dict(self.metrics), "num_users": self.num_users}


def report_from_ranks(ranks: Sequence[int], ks: Sequence[int] = DEFAULT_KS) -> MetricsReport:
    if not len(ranks):
        return MetricsReport({}, 0)
    metrics = {}
    for name in METRIC_NAMES:
        fn = _METRIC_FNS[name]
        for k in ks:
            # fsum is exactly rounded, so the mean does not depend on user order
            metrics[f"{name}@{k}"] = math.fsum(fn(r, k) for r in ranks) / len(ranks)
    return MetricsReport(metrics, len(ranks))


@dataclass
class UserRanking:
    user_id: str
    target: str
    rank: int
    top: list[str] = field(default_factory=list)


@dataclass
class EvalResult:
    report: MetricsReport
    rankings: list[UserRanking]


def evaluate(
    model: TextMatcher,
    examples: Sequence[Example],
    user_tokens: np.ndarray,
    user_mask: np.ndarray,
    catalog: CatalogEmbeddings,
    ks: Sequence[int] = DEFAULT_KS,
    user_index: np.ndarray | None = None,
    mask_history: bool = False,
    top_k: int = 5,
    batch_size: int = 64,
) -> EvalResult:
    """Rank the whole catalog for every example and average the per-user metrics."""
    if not len(examples):
        raise ValueError("no examples to evaluate")
    for ex in examples:
        if ex.target not in catalog.index:
            raise DataError(f"target {ex.target!r} of user {ex.user_id!r} missing from catalog")
    ids = user_index if model.user_id_embedding is not None else None
    users = embed_batched(model, user_tokens, user_mask, ids, side="user", batch_size=batch_size)
    return rank_users(examples, users, catalog, ks, mask_history, top_k)


def rank_users(examples: Sequence[Example], users: np.ndarray, catalog: CatalogEmbeddings,
               ks: Sequence[int] = DEFAULT_KS, mask_history: bool = False, top_k: int = 5) -> EvalResult:
    rankings = []
    scores_all = users @ catalog.matrix.T
    for ex, scores in zip(examples, scores_all):
        t = catalog.index[ex.target]
        if mask_history:
            for item in ex.prefix:
                j = catalog.index.get(item)
                if j is not None and j != t:
                    scores[j] = -np.inf
        rank = target_rank(scores, catalog.id_rank, t)
        top = []
        if top_k:
            top = [catalog.item_ids[i] for i in ranking_order(scores, catalog.id_rank)[:top_k]]
        rankings.append(UserRanking(ex.user_id, ex.target, rank, top))
    return EvalResult(report_from_ranks([r.rank for r in rankings], ks), rankings)


def write_report(path, report: MetricsReport, fingerprint: str = "", config: dict | None = None) -> None:
    obj = report.to_dict()
    obj["checkpoint"] = fingerprint
    obj["config"] = config or {}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_rankings(path, rankings: Iterable[UserRanking]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rankings:
            fh.write(json.dumps({"user_id": r.user_id, "target": r.target, "rank": r.rank, "top": r.top}) + "\n")


def read_rankings(path) -> list[UserRanking]:
    with open(path, encoding="utf-8") as fh:
        return [UserRanking(o["user_id"], o["target"], o["rank"], o["top"]) for o in map(json.loads, fh)]


def write_embeddings(path, item_ids: Sequence[str], matrix: np.ndarray, labels: Sequence[str] | None = None) -> None:
    """``N D`` header, then ``item_id v1 .. vD [label]`` per row with round-trippable floats."""
    n, d = matrix.shape
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{n} {d}\n")
        for i, item in enumerate(item_ids):
            row = " ".join(repr(float(x)) for x in matrix[i])
            tail = f" {labels[i]}" if labels is not None else ""
            fh.write(f"{item} {row}{tail}\n")


def read_embeddings(path) -> tuple[list[str], np.ndarray, list[str] | None]:
    with open(path, encoding="utf-8") as fh:
        n, d = map(int, fh.readline().split())
        ids, rows, labels = [], [], []
        for line in fh:
            parts = line.split()
            ids.append(parts[0])
            rows.append([float(x) for x in parts[1: d + 1]])
            if len(parts) > d + 1:
                labels.append(parts[d + 1])
    if len(ids) != n:
        raise ValueError(f"{path}: header says {n} rows, found {len(ids)}")
    return ids, np.array(rows, dtype=np.float64).reshape(n, d), (labels or None)
