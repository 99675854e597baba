"""Compact encoder-decoder transformer with session-split (block-sparse) encoding.

Each session of a history is encoded on its own, the per-session states are
concatenated and a single decoder step, started from the ``<s>`` token
embedding, cross-attends over all of them. The decoder output is the user or
item embedding; relevance is the raw dot product.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .verbalize import DECODER_START, SessionBatch, TokenSequence

CHECKPOINT_MAGIC = b"TASTE-CKPT-1\n"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 1
    max_session_len: int = 64
    dropout: float = 0.0
    id_fusion: str = "off"
    num_item_ids: int = 0
    num_user_ids: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        dims = (self.vocab_size, self.hidden_dim, self.num_heads, self.ffn_dim,
                self.encoder_layers, self.decoder_layers, self.max_session_len)
        if min(dims) < 1:
            raise ValueError(f"all model dimensions must be >= 1: {self}")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.id_fusion not in ("off", "embed"):
            raise ValueError(f"id_fusion must be 'off' or 'embed', got {self.id_fusion!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


@dataclass
class OpCounter:
    """Multiply-accumulates spent in the attention cores (scores and weighted sums)."""

    self_attention_macs: int = 0
    cross_attention_macs: int = 0
    peak_score_elements: int = 0

    def add(self, kind: str, macs: int, score_elements: int):
        if kind == "self":
            self.self_attention_macs += macs
        else:
            self.cross_attention_macs += macs
        self.peak_score_elements = max(self.peak_score_elements, score_elements)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mem, key_mask, counter: OpCounter | None = None, kind: str = "self"):
        # key_mask: bool, broadcastable to (B, Lq, Lk)
        B, Lq, d = x.shape
        Lk = mem.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q(x).view(B, Lq, h, dh).transpose(1, 2)
        k = self.k(mem).view(B, Lk, h, dh).transpose(1, 2)
        v = self.v(mem).view(B, Lk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        mask = key_mask.unsqueeze(1)
        scores = scores.masked_fill(~mask, torch.finfo(scores.dtype).min)
        # multiplying by the mask zeroes rows with no visible key instead of spreading them uniformly
        weights = torch.softmax(scores, dim=-1) * mask
        out = (self.drop(weights) @ v).transpose(1, 2).reshape(B, Lq, d)
        if counter is not None:
            counter.add(kind, 2 * B * h * Lq * Lk * dh, B * h * Lq * Lk)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d: int, ffn: int, dropout: float):
        super().__init__()
        self.w1 = nn.Linear(d, ffn)
        self.w2 = nn.Linear(ffn, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.w2(self.drop(F.gelu(self.w1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, cfg.num_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask, counter=None):
        y = self.norm1(x)
        x = x + self.drop(self.attn(y, y, mask, counter, "self"))
        return x + self.drop(self.ffn(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = Attention(d, cfg.num_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(d)
        self.cross_attn = Attention(d, cfg.num_heads, cfg.dropout)
        self.norm3 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, h, states, mask, counter=None):
        y = self.norm1(h)
        self_mask = torch.ones(h.shape[0], 1, 1, dtype=torch.bool, device=h.device)
        h = h + self.drop(self.self_attn(y, y, self_mask))
        h = h + self.drop(self.cross_attn(self.norm2(h), states, mask, counter, "cross"))
        return h + self.drop(self.ffn(self.norm3(h)))


class TextMatcher(nn.Module):
    """Shared tower for histories and items."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        d = cfg.hidden_dim
        self.token_embedding = nn.Embedding(cfg.vocab_size, d)
        self.positional_embedding = nn.Parameter(torch.zeros(cfg.max_session_len, d))
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))
        self.encoder_norm = nn.LayerNorm(d)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.decoder_norm = nn.LayerNorm(d)
        self.item_id_embedding = None
        self.user_id_embedding = None
        if cfg.id_fusion == "embed":
            if cfg.num_item_ids:
                self.item_id_embedding = nn.Embedding(cfg.num_item_ids, d)
            if cfg.num_user_ids:
                self.user_id_embedding = nn.Embedding(cfg.num_user_ids, d)
        self.counter: OpCounter | None = None

    # -- encoder ------------------------------------------------------------
    def encode_sessions(self, tokens: torch.Tensor, mask: torch.Tensor):
        """(B, n, m) tokens -> (B, n*m, d) states; every session attends only to itself."""
        B, n, m = tokens.shape
        if m > self.config.max_session_len:
            raise ValueError(f"session length {m} exceeds max_session_len {self.config.max_session_len}")
        x = self.token_embedding(tokens.reshape(B * n, m)) + self.positional_embedding[:m]
        key_mask = mask.reshape(B * n, 1, m)
        for layer in self.encoder:
            x = layer(x, key_mask, self.counter)
        x = self.encoder_norm(x)
        return x.reshape(B, n * m, -1), mask.reshape(B, n * m)

    def encode_dense(self, tokens: torch.Tensor, mask: torch.Tensor, block: int | None = None):
        """Single pass over (B, L) tokens with full attention.

        With ``block`` set, attention is restricted to the block diagonal and
        positions restart every ``block`` tokens, which is mathematically the
        same computation as :meth:`encode_sessions` with ``m == block``.
        """
        B, L = tokens.shape
        period = block or L
        if period > self.config.max_session_len:
            raise ValueError(f"position period {period} exceeds max_session_len")
        pos = torch.arange(L, device=tokens.device) % period
        x = self.token_embedding(tokens) + self.positional_embedding[pos]
        if block is None:
            key_mask = mask.reshape(B, 1, L)
        else:
            seg = torch.arange(L, device=tokens.device) // block
            same = seg[:, None] == seg[None, :]
            key_mask = same[None] & mask[:, None, :]
        for layer in self.encoder:
            x = layer(x, key_mask, self.counter)
        return self.encoder_norm(x), mask

    # -- decoder ------------------------------------------------------------
    def decode(self, states: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if not bool(mask.any(dim=1).all()):
            raise ValueError("every encoder position is masked; nothing to attend to")
        B = states.shape[0]
        h = self.token_embedding.weight[DECODER_START].expand(B, 1, -1)
        cross_mask = mask.reshape(B, 1, -1)
        for layer in self.decoder:
            h = layer(h, states, cross_mask, self.counter)
        return self.decoder_norm(h)[:, 0]

    def forward(self, tokens, mask, id_index=None, side: str = "item"):
        """Embed a batch of (B, n, m) session tokens; optional id fusion per ``side``."""
        states, flat_mask = self.encode_sessions(tokens, mask)
        out = self.decode(states, flat_mask)
        table = self.item_id_embedding if side == "item" else self.user_id_embedding
        if table is not None and id_index is not None:
            out = out + table(id_index)
        return out


def init_params(config: ModelConfig, seed: int) -> TextMatcher:
    """Build a model whose weights depend only on ``(config, seed)``."""
    model = TextMatcher(config)
    gen = torch.Generator().manual_seed(int(seed))
    d = config.hidden_dim
    with torch.no_grad():
        for name, p in model.named_parameters():
            if ".norm" in name or name.startswith(("encoder_norm", "decoder_norm")):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            elif p.dim() == 2 and "embedding" not in name:
                p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[1]))
            else:
                p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(d))
    return model.to(config.torch_dtype)


def init_std(name: str, param: torch.Tensor, config: ModelConfig) -> float:
    """Target standard deviation used by :func:`init_params` for a weight."""
    if param.dim() == 2 and "embedding" not in name:
        return 1.0 / math.sqrt(param.shape[1])
    return 1.0 / math.sqrt(config.hidden_dim)


@contextlib.contextmanager
def count_ops(model: TextMatcher):
    counter = OpCounter()
    prev, model.counter = model.counter, counter
    try:
        yield counter
    finally:
        model.counter = prev


# -- single-example operations ------------------------------------------------

@dataclass
class EncoderStates:
    states: torch.Tensor  # (n*m, d)
    mask: torch.Tensor  # (n*m,)


def _as_tensors(batch: SessionBatch, device=None):
    return (torch.as_tensor(batch.sessions, device=device)[None],
            torch.as_tensor(batch.attention_mask, device=device)[None])


def encode_sessions(model: TextMatcher, batch: SessionBatch) -> EncoderStates:
    if batch.sessions.shape != batch.attention_mask.shape:
        raise ValueError("session/mask shape mismatch")
    tokens, mask = _as_tensors(batch)
    states, flat = model.encode_sessions(tokens, mask)
    return EncoderStates(states[0], flat[0])


def decode_representation(model: TextMatcher, states: EncoderStates) -> torch.Tensor:
    return model.decode(states.states[None], states.mask[None])[0]


def encode_item(model: TextMatcher, tokens: TokenSequence | Sequence[int], item_index: int | None = None,
                max_len: int | None = None) -> torch.Tensor:
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tuple(tokens)
    if not ids:
        raise ValueError("cannot encode an empty token sequence")
    L = max_len or len(ids)
    if len(ids) > L:
        raise ValueError(f"{len(ids)} tokens exceed item max length {L}")
    t = torch.zeros(1, 1, L, dtype=torch.long)
    t[0, 0, : len(ids)] = torch.tensor(ids)
    mask = torch.zeros(1, 1, L, dtype=torch.bool)
    mask[0, 0, : len(ids)] = True
    idx = None if item_index is None else torch.tensor([item_index])
    return model(t, mask, idx, side="item")[0]


def score(user: torch.Tensor | np.ndarray, item: torch.Tensor | np.ndarray) -> float:
    u = np.asarray(user.detach() if isinstance(user, torch.Tensor) else user, dtype=np.float64)
    v = np.asarray(item.detach() if isinstance(item, torch.Tensor) else item, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch {u.shape} vs {v.shape}")
    return float(u @ v)


@dataclass
class LossOutput:
    loss: torch.Tensor
    scores: torch.Tensor
    user_embeddings: torch.Tensor
    item_embeddings: torch.Tensor


def contrastive_loss(user_emb: torch.Tensor, item_emb: torch.Tensor, positives: torch.Tensor,
                     candidate_mask: torch.Tensor | None = None):
    scores = user_emb @ item_emb.T
    if candidate_mask is not None:
        scores = scores.masked_fill(~candidate_mask, float("-inf"))
    return F.cross_entropy(scores, positives), scores


def forward_loss(model: TextMatcher, user_tokens, user_mask, item_tokens, item_mask, positives,
                 candidate_mask=None, user_index=None, item_index=None) -> LossOutput:
    """Softmax cross-entropy of each user over the shared candidate set.

    ``user_tokens``: (B, n, m); ``item_tokens``: (C, 1, L); ``positives``: (B,)
    indices into the candidates. ``candidate_mask`` (B, C) restricts which
    candidates each user's softmax may see.
    """
    positives = torch.as_tensor(positives, dtype=torch.long)
    C = item_tokens.shape[0]
    if positives.numel() and (int(positives.min()) < 0 or int(positives.max()) >= C):
        raise IndexError(f"positive index out of range for {C} candidates")
    u = model(user_tokens, user_mask, user_index, side="user")
    v = model(item_tokens, item_mask, item_index, side="item")
    loss, scores = contrastive_loss(u, v, positives, candidate_mask)
    return LossOutput(loss, scores, u, v)


def backward(model: TextMatcher, out: LossOutput) -> dict[str, torch.Tensor]:
    """Gradient of the loss for every named parameter (zeros where unused)."""
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(out.loss, params, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


@torch.no_grad()
def embed_batched(model: TextMatcher, tokens: np.ndarray, mask: np.ndarray, ids: np.ndarray | None = None,
                  side: str = "item", batch_size: int = 256) -> np.ndarray:
    """Embed (N, n, m) or (N, L) token arrays in chunks; returns float64 (N, d)."""
    if tokens.ndim == 2:
        tokens, mask = tokens[:, None, :], mask[:, None, :]
    was_training = model.training
    model.eval()
    out = []
    for s in range(0, len(tokens), batch_size):
        t = torch.as_tensor(tokens[s:s + batch_size], dtype=torch.long)
        mk = torch.as_tensor(mask[s:s + batch_size], dtype=torch.bool)
        idx = None if ids is None else torch.as_tensor(ids[s:s + batch_size], dtype=torch.long)
        out.append(model(t, mk, idx, side=side).to(torch.float64).numpy())
    model.train(was_training)
    if not out:
        return np.zeros((0, model.config.hidden_dim))
    return np.concatenate(out)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, model: TextMatcher, meta: dict | None = None) -> str:
    """Write magic line, JSON header line, then raw little-endian tensors. Returns the fingerprint."""
    state = model.state_dict()
    index, blobs = [], []
    for name, t in state.items():
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        index.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype.name)})
        blobs.append(arr.tobytes(order="C"))
    header = {"config": asdict(model.config), "meta": meta or {}, "tensors": index}
    data = CHECKPOINT_MAGIC + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(blobs)
    Path(path).write_bytes(data)
    return fingerprint_bytes(data)


def fingerprint_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def checkpoint_fingerprint(path) -> str:
    return fingerprint_bytes(Path(path).read_bytes())


def load_checkpoint(path) -> tuple[TextMatcher, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (missing magic header)")
    rest = data[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    payload = memoryview(rest[nl + 1:])
    config = ModelConfig(**header["config"])
    model = TextMatcher(config).to(config.torch_dtype)
    state, offset = {}, 0
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        offset += count * dtype.itemsize
        state[entry["name"]] = torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))
    if offset != len(payload):
        raise ValueError(f"{path}: trailing or missing tensor bytes")
    model.load_state_dict(state)
    return model, header["meta"]
