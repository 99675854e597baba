"""Interaction ingestion, k-core filtering and leave-one-out splits."""
from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DataError("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    attributes: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        names = [name for name, _ in self.attributes]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate attribute names on item {self.item_id}")

    def get(self, name: str) -> str | None:
        for key, value in self.attributes:
            if key == name:
                return value
        return None


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    items: tuple[str, ...]


@dataclass(frozen=True)
class Example:
    user_id: str
    prefix: tuple[str, ...]
    target: str

    def to_json(self) -> str:
        return json.dumps({"user_id": self.user_id, "prefix": list(self.prefix), "target": self.target})


@dataclass
class DatasetSplit:
    train: list[Example]
    dev: list[Example]
    test: list[Example]


def ingest_interactions(path: str | os.PathLike) -> list[InteractionRecord]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"interactions file not found: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            user_id, item_id, ts = fields
            try:
                timestamp = int(ts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer timestamp {ts!r}") from None
            try:
                records.append(InteractionRecord(user_id, item_id, timestamp))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return records


def load_items(path: str | os.PathLike) -> list[ItemRecord]:
    """Read the JSON-lines item catalog, keeping attribute order."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"item catalog not found: {path}")
    items = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                attrs = tuple((str(k), str(v)) for k, v in obj.get("attributes", []))
                items.append(ItemRecord(str(obj["item_id"]), attrs))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad catalog entry ({exc})") from None
    return items


def write_items(items: Iterable[ItemRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps({"item_id": item.item_id, "attributes": [list(a) for a in item.attributes]}) + "\n")


def write_interactions(records: Iterable[InteractionRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.timestamp}\n")


def date_filter(records: Sequence[InteractionRecord], min_timestamp: int, max_timestamp: int) -> list[InteractionRecord]:
    if min_timestamp > max_timestamp:
        raise ValueError(f"min_timestamp {min_timestamp} > max_timestamp {max_timestamp}")
    return [r for r in records if min_timestamp <= r.timestamp <= max_timestamp]


def k_core_filter(records: Sequence[InteractionRecord], min_count: int = 5) -> list[InteractionRecord]:
    """Drop users and items with fewer than ``min_count`` records until nothing changes."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    kept = list(records)
    while True:
        users = Counter(r.user_id for r in kept)
        items = Counter(r.item_id for r in kept)
        nxt = [r for r in kept if users[r.user_id] >= min_count and items[r.item_id] >= min_count]
        if len(nxt) == len(kept):
            return nxt
        kept = nxt


def build_histories(records: Sequence[InteractionRecord]) -> list[UserHistory]:
    # users ordered by first appearance; sort is stable so equal timestamps keep file order
    by_user: dict[str, list[InteractionRecord]] = {}
    for r in records:
        by_user.setdefault(r.user_id, []).append(r)
    histories = []
    for user_id, events in by_user.items():
        events = sorted(events, key=lambda r: r.timestamp)
        histories.append(UserHistory(user_id, tuple(r.item_id for r in events)))
    return histories


def leave_one_out_split(histories: Sequence[UserHistory]) -> DatasetSplit:
    train, dev, test = [], [], []
    for h in histories:
        items = h.items
        T = len(items)
        if T < 4:
            raise DataError(f"user {h.user_id} has {T} interactions; at least 4 are needed for a leave-one-out split")
        # 1-based v_i for 2 <= i <= T-2
        for i in range(2, T - 1):
            train.append(Example(h.user_id, items[: i - 1], items[i - 1]))
        dev.append(Example(h.user_id, items[: T - 2], items[T - 2]))
        test.append(Example(h.user_id, items[: T - 1], items[T - 1]))
    return DatasetSplit(train, dev, test)


def check_split_identity(split: DatasetSplit, num_actions: int, num_users: int) -> None:
    expected = num_actions - 3 * num_users
    if len(split.train) != expected or len(split.dev) != num_users or len(split.test) != num_users:
        raise DataError(
            f"split sizes train={len(split.train)} dev={len(split.dev)} test={len(split.test)} "
            f"inconsistent with {num_actions} actions over {num_users} users"
        )


def write_examples(examples: Iterable[Example], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def read_examples(path: str | os.PathLike) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(Example(str(obj["user_id"]), tuple(obj["prefix"]), str(obj["target"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad split entry ({exc})") from None
    return out


def write_histories(histories: Iterable[UserHistory], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h in histories:
            fh.write(json.dumps({"user_id": h.user_id, "items": list(h.items)}) + "\n")


def read_histories(path: str | os.PathLike) -> list[UserHistory]:
    with open(path, encoding="utf-8") as fh:
        return [UserHistory(o["user_id"], tuple(o["items"])) for o in map(json.loads, fh) if o]


def restrict_catalog(items: Sequence[ItemRecord], records: Sequence[InteractionRecord]) -> list[ItemRecord]:
    """Catalog entries for the items that survive filtering.

    Items present in the interactions but absent from the catalog get an empty
    attribute list; order follows the catalog file, then first appearance.
    """
    wanted = dict.fromkeys(r.item_id for r in records)
    out = [it for it in items if it.item_id in wanted]
    known = {it.item_id for it in out}
    out.extend(ItemRecord(i) for i in wanted if i not in known)
    return out


def dataset_stats(records: Sequence[InteractionRecord], split: DatasetSplit) -> dict:
    return {
        "users": len({r.user_id for r in records}),
        "items": len({r.item_id for r in records}),
        "actions": len(records),
        "train": len(split.train),
        "dev": len(split.dev),
        "test": len(split.test),
    }
