"""Item/history templates, a word-level vocabulary, tokenization and session splitting."""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import ItemRecord

PAD, UNK, DECODER_START = 0, 1, 2
SPECIALS = ("<pad>", "<unk>", "<s>")

HISTORY_TEMPLATE = "Here is the visit history list of user: {history} recommend next item"
USER_HISTORY_TEMPLATE = "Here is the visit history list of {user}: {history} recommend next item"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class VerbalizeConfig:
    attribute_names: tuple[str, ...] = ("title",)
    include_item_id: bool = True
    include_user_id: bool = False
    history_template: str | None = None

    def __post_init__(self):
        if self.history_template is None:
            tpl = USER_HISTORY_TEMPLATE if self.include_user_id else HISTORY_TEMPLATE
            object.__setattr__(self, "history_template", tpl)
        tpl = self.history_template
        if tpl.count("{history}") != 1:
            raise ValueError("history_template must contain {history} exactly once")
        if ("{user}" in tpl) != self.include_user_id:
            raise ValueError("{user} placeholder must appear iff include_user_id is set")


def verbalize_item(item: ItemRecord, config: VerbalizeConfig) -> str:
    parts = []
    if config.include_item_id:
        parts.append(f"id: {item.item_id}")
    for name in config.attribute_names:
        value = item.get(name)
        if value is not None:
            parts.append(f"{name}: {value}")
    return " ".join(parts)


def verbalize_history(
    item_ids: Sequence[str],
    catalog: Mapping[str, ItemRecord],
    config: VerbalizeConfig,
    user_id: str | None = None,
) -> str:
    """Fill the history template with item texts, newest first."""
    if not item_ids:
        raise ValueError("cannot verbalize an empty history")
    texts = [verbalize_item(catalog.get(i) or ItemRecord(i), config) for i in reversed(item_ids)]
    fill = {"history": ", ".join(texts)}
    if config.include_user_id:
        if user_id is None:
            raise ValueError("include_user_id set but no user_id given")
        fill["user"] = f"user_{user_id}"
    return config.history_template.format(**fill)


def word_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


@dataclass
class TokenVocab:
    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {tok: i for i, tok in enumerate(SPECIALS)}
        self.id_to_token = sorted(self.token_to_id, key=self.token_to_id.get)

    def __len__(self):
        return len(self.token_to_id)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def dumps(self) -> str:
        lines = ["\t".join(SPECIALS)]
        lines.extend(self.id_to_token[len(SPECIALS):])
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "TokenVocab":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if lines[0].split("\t") != list(SPECIALS):
            raise ValueError(f"{path}: vocab header must list {SPECIALS}")
        tokens = [t for t in lines[1:] if t]
        mapping = {tok: i for i, tok in enumerate(SPECIALS)}
        for i, tok in enumerate(tokens):
            mapping[tok] = i + len(SPECIALS)
        return cls(mapping)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()[:16]


def build_vocab(texts: Iterable[str], max_size: int) -> TokenVocab:
    if max_size < 4:
        raise ValueError("max_size must be >= 4")
    counts = Counter()
    for text in texts:
        counts.update(word_tokens(text))
    for tok in SPECIALS:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: max_size - len(SPECIALS)]
    mapping = {tok: i for i, tok in enumerate(SPECIALS)}
    for tok, _ in ranked:
        mapping[tok] = len(mapping)
    return TokenVocab(mapping)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    original_length: int


def tokenize(text: str, vocab: TokenVocab, max_len: int) -> TokenSequence:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    toks = word_tokens(text)
    return TokenSequence(tuple(vocab.lookup(t) for t in toks[:max_len]), len(toks))


@dataclass
class SessionBatch:
    """``n`` PAD-filled sessions of ``m`` token ids plus the real-token mask."""

    sessions: np.ndarray
    attention_mask: np.ndarray

    @property
    def n(self) -> int:
        return self.sessions.shape[0]

    @property
    def m(self) -> int:
        return self.sessions.shape[1]


def split_sessions(tokens: TokenSequence | Sequence[int], n: int, m: int) -> SessionBatch:
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tuple(tokens)
    ids = ids[: n * m]
    flat = np.full(n * m, PAD, dtype=np.int64)
    flat[: len(ids)] = ids
    mask = np.zeros(n * m, dtype=bool)
    mask[: len(ids)] = True
    return SessionBatch(flat.reshape(n, m), mask.reshape(n, m))


@dataclass
class ItemTable:
    """Tokenized catalog: row ``i`` holds the item ``item_ids[i]``."""

    item_ids: list[str]
    tokens: np.ndarray
    mask: np.ndarray
    texts: list[str]

    def __post_init__(self):
        self.index = {item_id: i for i, item_id in enumerate(self.item_ids)}

    def __len__(self):
        return len(self.item_ids)


def build_item_table(items: Sequence[ItemRecord], vocab: TokenVocab, config: VerbalizeConfig, max_len: int) -> ItemTable:
    texts = [verbalize_item(it, config) for it in items]
    batch = [split_sessions(tokenize(t, vocab, max_len), 1, max_len) for t in texts]
    if not batch:
        tokens = np.zeros((0, max_len), dtype=np.int64)
        mask = np.zeros((0, max_len), dtype=bool)
    else:
        tokens = np.stack([b.sessions[0] for b in batch])
        mask = np.stack([b.attention_mask[0] for b in batch])
    empty = [items[i].item_id for i in range(len(items)) if not mask[i].any()]
    if empty:
        raise ValueError(f"items with empty verbalization: {empty[:5]}")
    return ItemTable([it.item_id for it in items], tokens, mask, texts)


def history_sessions(
    prefix: Sequence[str],
    catalog: Mapping[str, ItemRecord],
    vocab: TokenVocab,
    config: VerbalizeConfig,
    n: int,
    m: int,
    user_id: str | None = None,
) -> SessionBatch:
    text = verbalize_history(prefix, catalog, config, user_id)
    return split_sessions(tokenize(text, vocab, n * m), n, m)
