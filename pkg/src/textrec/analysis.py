"""Popularity-bias and long-tail diagnostics over ranking results."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Example
from .ranker import MetricsReport, UserRanking, report_from_ranks, write_embeddings
from .verbalize import word_tokens


def item_frequency(train: Sequence[Example], catalog_ids: Iterable[str]) -> dict[str, int]:
    """Times each catalog item is a training target; absent items count 0."""
    counts = Counter(ex.target for ex in train)
    table = {item: counts.get(item, 0) for item in catalog_ids}
    missing = set(counts) - set(table)
    if missing:
        raise ValueError(f"train targets outside the catalog: {sorted(missing)[:5]}")
    return table


@dataclass(frozen=True)
class TailSplit:
    threshold: int
    long_tail: frozenset
    head: frozenset
    achieved_ratio: float

    def is_tail(self, item: str) -> bool:
        return item in self.long_tail


def tail_split_by_threshold(freq: Mapping[str, int], threshold: int) -> TailSplit:
    tail = frozenset(i for i, c in freq.items() if c <= threshold)
    head = frozenset(freq) - tail
    return TailSplit(threshold, tail, head, len(tail) / len(freq) if freq else 0.0)


def tail_split_by_ratio(freq: Mapping[str, int], tail_fraction: float = 0.2) -> TailSplit:
    """Smallest integer threshold whose long tail (count <= threshold) covers ``tail_fraction`` of items."""
    if not 0.0 < tail_fraction < 1.0:
        raise ValueError("tail_fraction must be in (0, 1)")
    if not freq:
        raise ValueError("empty frequency table")
    counts = sorted(freq.values())
    need = math.ceil(tail_fraction * len(counts) - 1e-9)
    return tail_split_by_threshold(freq, counts[max(need, 1) - 1])


def grouped_metrics(rankings: Sequence[UserRanking], split: TailSplit, ks: Sequence[int] = (10, 20)) -> dict[str, MetricsReport]:
    """Metrics separately for users whose target is long-tail vs head."""
    tail = [r.rank for r in rankings if split.is_tail(r.target)]
    head = [r.rank for r in rankings if not split.is_tail(r.target)]
    return {"long_tail": report_from_ranks(tail, ks), "head": report_from_ranks(head, ks)}


def popular_ratio(top_lists: Iterable[Sequence[str]], popular_set, top_k: int = 5) -> float:
    """Share of all top-k recommendation slots filled by popular items."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    popular = set(popular_set)
    slots = hits = 0
    for top in top_lists:
        for item in top[:top_k]:
            slots += 1
            hits += item in popular
    return hits / slots if slots else 0.0


def ngrams(tokens: Sequence[str], n: int) -> list[tuple]:
    return [tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1)]


def dist_n(texts_per_user: Sequence[Sequence[str]], n: int) -> float:
    """Distinct-n per user (n-grams pooled over that user's texts), averaged over users.

    Texts shorter than ``n`` tokens contribute no n-grams; users without any
    n-gram are left out of the average.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not texts_per_user:
        raise ValueError("no texts")
    scores = []
    for texts in texts_per_user:
        grams = [g for t in texts for g in ngrams(word_tokens(t), n)]
        if grams:
            scores.append(len(set(grams)) / len(grams))
    return math.fsum(scores) / len(scores) if scores else 0.0


def sentence_bleu4(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    """BLEU-4, uniform weights, add-one smoothing for orders without matches."""
    if not reference:
        raise ValueError("empty reference")
    c, r = len(hypothesis), len(reference)
    if c == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        hyp = Counter(ngrams(hypothesis, n))
        ref = Counter(ngrams(reference, n))
        total = sum(hyp.values())
        match = sum(min(cnt, ref[g]) for g, cnt in hyp.items())
        p = match / total if match else 1.0 / (total + 1)
        log_p += 0.25 * math.log(p)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def bleu4(recommended: Sequence[Sequence[str]], gold: Sequence[str]) -> float:
    """Per user: mean BLEU-4 of each recommended text against the gold text; then mean over users."""
    if len(recommended) != len(gold):
        raise ValueError("one gold text per user required")
    per_user = []
    for texts, ref in zip(recommended, gold):
        ref_toks = word_tokens(ref)
        if not ref_toks:
            raise ValueError("empty gold text")
        if texts:
            per_user.append(math.fsum(sentence_bleu4(word_tokens(t), ref_toks) for t in texts) / len(texts))
    return math.fsum(per_user) / len(per_user) if per_user else 0.0


def select_for_export(item_ids: Sequence[str], popular_set, per_group: int = 50, seed: int = 0) -> list[tuple[str, str]]:
    """Seeded pick of ``per_group`` popular and ``per_group`` other items, labelled."""
    popular = set(popular_set)
    pop = [i for i in item_ids if i in popular]
    rest = [i for i in item_ids if i not in popular]
    if not pop:
        raise ValueError("popular set has no items in the catalog")
    rng = np.random.default_rng(seed)

    def pick(group):
        if len(group) <= per_group:
            return list(group)
        return [group[i] for i in sorted(rng.choice(len(group), size=per_group, replace=False))]

    return [(i, "popular") for i in pick(pop)] + [(i, "other") for i in pick(rest)]


def export_embeddings(path, item_ids: Sequence[str], matrix: np.ndarray, popular_set, per_group: int = 50, seed: int = 0) -> int:
    chosen = select_for_export(item_ids, popular_set, per_group, seed)
    index = {item: i for i, item in enumerate(item_ids)}
    rows = np.stack([matrix[index[i]] for i, _ in chosen])
    write_embeddings(path, [i for i, _ in chosen], rows, [lab for _, lab in chosen])
    return len(chosen)


def analysis_report(train: Sequence[Example], rankings: Sequence[UserRanking], item_ids: Sequence[str],
                    texts: Mapping[str, str], popular_set, tail_fraction: float = 0.2, top_k: int = 5,
                    ks: Sequence[int] = (10, 20)) -> dict:
    freq = item_frequency(train, item_ids)
    split = tail_split_by_ratio(freq, tail_fraction)
    groups = grouped_metrics(rankings, split, ks)
    recs = [[texts[i] for i in r.top[:top_k]] for r in rankings]
    counts = np.array(list(freq.values()))
    return {
        "frequency": {
            "items": len(freq),
            "train_targets": int(counts.sum()),
            "zero_count_items": int((counts == 0).sum()),
            "max": int(counts.max()) if len(counts) else 0,
            "median": float(np.median(counts)) if len(counts) else 0.0,
        },
        "tail": {
            "requested_fraction": tail_fraction,
            "threshold": split.threshold,
            "long_tail_items": len(split.long_tail),
            "head_items": len(split.head),
            "achieved_ratio": split.achieved_ratio,
        },
        "grouped_metrics": {name: rep.to_dict() for name, rep in groups.items()},
        "popular_ratio": popular_ratio((r.top for r in rankings), popular_set, top_k),
        "popular_set_size": len(set(popular_set)),
        "top_k": top_k,
        "dist_1": dist_n(recs, 1),
        "dist_2": dist_n(recs, 2),
        "dist_mode": "per-user n-gram pool, averaged over users",
        "bleu_4": bleu4(recs, [texts[r.target] for r in rankings]),
    }
