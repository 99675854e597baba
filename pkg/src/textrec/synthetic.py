"""Synthetic interaction corpora whose item texts make the next item predictable.

Items sit on a hidden successor cycle. Each item's ``pairs`` attribute names
the code word of its successor, so the newest item in a history textually
points at the target. Users start at a (optionally Zipf-skewed) item and walk
the cycle, which yields a long-tailed item popularity for skewed starts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import InteractionRecord, ItemRecord

_SYLLABLES = ("ka", "lo", "mi", "ru", "te", "zo", "pa", "ne", "shi", "vu", "bo", "da")
_BRANDS = ("acme", "nova", "lumen", "orbit", "terra", "pixel")


@dataclass
class SyntheticCorpus:
    records: list[InteractionRecord]
    items: list[ItemRecord]
    successor: dict[str, str]


def _code_word(i: int) -> str:
    a, b = divmod(i, len(_SYLLABLES))
    c, a = divmod(a, len(_SYLLABLES))
    return _SYLLABLES[a] + _SYLLABLES[b] + _SYLLABLES[c % len(_SYLLABLES)] + str(i)


def make_corpus(n_users: int = 50, n_items: int = 30, min_len: int = 6, max_len: int = 9,
                zipf: float = 0.0, seed: int = 0, start_time: int = 1_546_300_000) -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    ids = [str(100 + i) for i in range(n_items)]
    cycle = rng.permutation(n_items)
    succ = {ids[cycle[j]]: ids[cycle[(j + 1) % n_items]] for j in range(n_items)}
    words = {item: _code_word(i) for i, item in enumerate(ids)}
    items = [
        ItemRecord(item, (("title", f"{_BRANDS[i % len(_BRANDS)]} {words[item]}"),
                          ("pairs", words[succ[item]]),
                          ("category", "thing")))
        for i, item in enumerate(ids)
    ]
    weights = 1.0 / np.arange(1, n_items + 1) ** zipf
    weights /= weights.sum()
    records = []
    for u in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        item = ids[int(rng.choice(n_items, p=weights))]
        t = start_time + int(rng.integers(0, 10_000))
        for _ in range(length):
            records.append(InteractionRecord(f"u{u}", item, t))
            t += int(rng.integers(1, 1000))
            item = succ[item]
    return SyntheticCorpus(records, items, succ)
