"""Contrastive dual-encoder training with in-batch and sampled negatives."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .corpus import Example, ItemRecord, UserHistory
from .encoder import TextMatcher, embed_batched, forward_loss
from .ranker import CatalogEmbeddings, encode_catalog, ranking_order
from .verbalize import ItemTable, TokenVocab, VerbalizeConfig, history_sessions

log = logging.getLogger(__name__)

STRATEGY_KINDS = ("inbatch", "random", "popular", "hard")


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class NegativeStrategy:
    kind: str = "random"
    k: int = 9
    popular_set_size: int = 500
    hard_pool_size: int = 100
    # which interactions count towards popularity: every action, or train targets only
    popularity_basis: str = "full"
    # False: each example's softmax sees only its own sampled negatives plus the batch positives
    shared_pool: bool = True

    def __post_init__(self):
        kind = "inbatch" if self.kind == "inbatch_only" else self.kind
        object.__setattr__(self, "kind", kind)
        if kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown negative strategy {self.kind!r}")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.popularity_basis not in ("full", "train_targets"):
            raise ValueError("popularity_basis must be 'full' or 'train_targets'")
        if kind == "popular" and self.popular_set_size < self.k:
            raise ValueError("popular_set_size must be >= k")
        if kind == "hard" and self.hard_pool_size < self.k:
            raise ValueError("hard_pool_size must be >= k")

    @property
    def sampled(self) -> int:
        return 0 if self.kind == "inbatch" else self.k


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    warmup_proportion: float = 0.1
    total_steps: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float = 0.0
    remine_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.warmup_proportion <= 1.0:
            raise ValueError("warmup_proportion must be in [0, 1]")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")


# second stage: start from an in-batch checkpoint, lower lr, no warmup
HARD_STAGE_LR = 5e-5
HARD_STAGE_WARMUP = 0.0


def hard_stage_config(base: TrainConfig) -> TrainConfig:
    return replace(base, learning_rate=HARD_STAGE_LR, warmup_proportion=HARD_STAGE_WARMUP)


# -- sampling -----------------------------------------------------------------

def _draw(pool: Sequence[str], exclude: set | frozenset, k: int, rng: np.random.Generator, what: str) -> list[str]:
    candidates = [c for c in dict.fromkeys(pool) if c not in exclude]
    if len(candidates) < k:
        raise ValueError(f"only {len(candidates)} {what} candidates left after exclusions, need {k}")
    picks = rng.choice(len(candidates), size=k, replace=False)
    return [candidates[i] for i in picks]


def sample_random_negatives(catalog: Sequence[str], exclude, k: int, rng: np.random.Generator) -> list[str]:
    return _draw(catalog, exclude, k, rng, "random")


def build_popular_set(interactions: Iterable[str], top_n: int = 500) -> list[str]:
    """Most frequent item ids, most popular first; ties go to the smaller id."""
    counts = Counter(interactions)
    return [item for item, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]]


def sample_popular_negatives(popular_set: Sequence[str], exclude, k: int, rng: np.random.Generator) -> list[str]:
    return _draw(sorted(popular_set) if isinstance(popular_set, (set, frozenset)) else popular_set,
                 exclude, k, rng, "popular")


def example_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    # one stream per (seed, epoch, example) keeps results independent of processing order
    return np.random.default_rng([seed, epoch, index])


# -- data ---------------------------------------------------------------------

@dataclass
class TrainingData:
    examples: list[Example]
    user_tokens: np.ndarray  # (E, n, m)
    user_mask: np.ndarray
    items: ItemTable
    exclusions: list[frozenset]
    user_index: dict[str, int] = field(default_factory=dict)

    def user_ids(self, rows: Sequence[int]) -> np.ndarray:
        return np.array([self.user_index.get(self.examples[i].user_id, 0) for i in rows], dtype=np.int64)


def encode_examples(examples: Sequence[Example], catalog: Mapping[str, ItemRecord], vocab: TokenVocab,
                    config: VerbalizeConfig, n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    tokens = np.zeros((len(examples), n, m), dtype=np.int64)
    mask = np.zeros((len(examples), n, m), dtype=bool)
    for i, ex in enumerate(examples):
        b = history_sessions(ex.prefix, catalog, vocab, config, n, m, ex.user_id)
        tokens[i], mask[i] = b.sessions, b.attention_mask
    return tokens, mask


def prepare_training_data(examples: Sequence[Example], histories: Sequence[UserHistory], catalog: Mapping[str, ItemRecord],
                          items: ItemTable, vocab: TokenVocab, config: VerbalizeConfig, n: int, m: int,
                          user_index: dict[str, int] | None = None) -> TrainingData:
    full = {h.user_id: frozenset(h.items) for h in histories}
    exclusions = [full.get(ex.user_id, frozenset(ex.prefix)) | {ex.target} for ex in examples]
    tokens, mask = encode_examples(examples, catalog, vocab, config, n, m)
    return TrainingData(list(examples), tokens, mask, items, exclusions, user_index or {})


# -- batches ------------------------------------------------------------------

@dataclass
class CandidateBatch:
    candidates: list[str]
    positives: list[int]
    mask: np.ndarray | None = None  # (B, C) visibility, None = every candidate visible

    @property
    def size(self) -> int:
        return len(self.candidates)


def assemble_batch(targets: Sequence[str], negatives: Sequence[Sequence[str]], shared: bool = True) -> CandidateBatch:
    """Deduplicated candidate set: all positives first, then sampled negatives in order."""
    if len(targets) != len(negatives):
        raise ValueError("one negative list per example required")
    index: dict[str, int] = {}
    for item in list(targets) + [n for negs in negatives for n in negs]:
        index.setdefault(item, len(index))
    if len(index) < 2:
        raise ValueError("a batch needs at least two distinct candidates")
    positives = [index[t] for t in targets]
    mask = None
    if not shared:
        mask = np.zeros((len(targets), len(index)), dtype=bool)
        mask[:, positives] = True
        for b, negs in enumerate(negatives):
            mask[b, [index[n] for n in negs]] = True
    return CandidateBatch(list(index), positives, mask)


def lr_schedule(step: int, total_steps: int, peak_lr: float, warmup_proportion: float) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(warmup_proportion * total_steps)
    if warmup and step <= warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)


# -- hard negatives -----------------------------------------------------------

def mine_hard_negatives(model: TextMatcher, data: TrainingData, pool_size: int = 100,
                        catalog: CatalogEmbeddings | None = None, batch_size: int = 64) -> list[list[str]]:
    """Top-``pool_size`` non-excluded items per training example under ``model``."""
    if catalog is None:
        catalog = encode_catalog(model, data.items)
    ids = data.user_ids(range(len(data.examples))) if model.user_id_embedding is not None else None
    users = embed_batched(model, data.user_tokens, data.user_mask, ids, side="user", batch_size=batch_size)
    pools = []
    for u, excl in zip(users, data.exclusions):
        order = ranking_order(catalog.matrix @ u, catalog.id_rank)
        pool = []
        for i in order:
            item = catalog.item_ids[i]
            if item not in excl:
                pool.append(item)
                if len(pool) == pool_size:
                    break
        pools.append(pool)
    return pools


# -- training loop ------------------------------------------------------------

@dataclass
class TrainResult:
    log: list[dict]
    final_loss: float


def sample_for_example(strategy: NegativeStrategy, idx: int, data: TrainingData, rng: np.random.Generator,
                       popular: Sequence[str] | None, hard_pools: Sequence[Sequence[str]] | None) -> list[str]:
    k = strategy.sampled
    if k == 0:
        return []
    excl = data.exclusions[idx]
    if strategy.kind == "random":
        return sample_random_negatives(data.items.item_ids, excl, k, rng)
    if strategy.kind == "popular":
        return sample_popular_negatives(popular, excl, k, rng)
    return _draw(hard_pools[idx], excl, k, rng, "hard")


def train(model: TextMatcher, data: TrainingData, config: TrainConfig, strategy: NegativeStrategy,
          popular: Sequence[str] | None = None, hard_pools: Sequence[Sequence[str]] | None = None,
          log_path=None) -> TrainResult:
    """Adam + linear schedule over seeded epoch shuffles. Mutates ``model`` in place."""
    E = len(data.examples)
    if E == 0:
        raise ValueError("no training examples")
    if strategy.kind == "popular" and popular is None:
        raise ValueError("popular strategy needs a popular item set")
    if strategy.kind == "hard" and hard_pools is None:
        raise ValueError("hard strategy needs mined pools (mine_hard_negatives)")
    torch.manual_seed(config.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2),
                           eps=config.eps, weight_decay=0.0)
    items = data.items
    use_item_ids = model.item_id_embedding is not None
    use_user_ids = model.user_id_embedding is not None
    records: list[dict] = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    epoch, order, cursor = -1, np.empty(0, dtype=np.int64), 0
    loss_value = float("nan")
    try:
        for step in range(config.total_steps):
            if cursor >= len(order):
                epoch += 1
                order = np.random.default_rng([config.seed, epoch]).permutation(E)
                cursor = 0
            rows = order[cursor: cursor + config.batch_size]
            cursor += config.batch_size

            if (strategy.kind == "hard" and config.remine_every and step and step % config.remine_every == 0):
                hard_pools = mine_hard_negatives(model, data, strategy.hard_pool_size)
                model.train()

            negatives = [sample_for_example(strategy, int(i), data, example_rng(config.seed, epoch, int(i)),
                                            popular, hard_pools) for i in rows]
            batch = assemble_batch([data.examples[i].target for i in rows], negatives, strategy.shared_pool)
            cand_rows = [items.index[c] for c in batch.candidates]

            lr = lr_schedule(step, config.total_steps, config.learning_rate, config.warmup_proportion)
            for group in opt.param_groups:
                group["lr"] = lr
            out = forward_loss(
                model,
                torch.as_tensor(data.user_tokens[rows]),
                torch.as_tensor(data.user_mask[rows]),
                torch.as_tensor(items.tokens[cand_rows])[:, None, :],
                torch.as_tensor(items.mask[cand_rows])[:, None, :],
                batch.positives,
                None if batch.mask is None else torch.as_tensor(batch.mask),
                torch.as_tensor(data.user_ids(rows)) if use_user_ids else None,
                torch.as_tensor(cand_rows) if use_item_ids else None,
            )
            loss_value = float(out.loss.detach())
            if not math.isfinite(loss_value):
                raise NumericError(f"non-finite loss {loss_value} at step {step} (lr={lr:g})")
            opt.zero_grad(set_to_none=True)
            out.loss.backward()
            if config.grad_clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
            opt.step()
            entry = {"step": step, "lr": lr, "loss": loss_value}
            records.append(entry)
            if fh:
                fh.write(json.dumps(entry) + "\n")
            if step % 100 == 0:
                log.debug("step %d lr %.3g loss %.4f", step, lr, loss_value)
    finally:
        if fh:
            fh.close()
    model.eval()
    return TrainResult(records, loss_value)
