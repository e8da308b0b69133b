"""Causal-transformer next-item model with a freezable item table.

Positional embeddings are indexed by distance from the sequence end (the last
slot always gets position 1), so left-padding a sequence further never moves
the real items' positions. Padded slots neither attend nor are attended to;
their hidden states are zeroed after every block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .optim import ParameterGroup
from .rng import Rng
from .tensor import Tensor

INIT_STD = 0.02


@dataclass
class BackboneConfig:
    num_items: int
    d: int = 64
    n: int = 50
    blocks: int = 2
    heads: int = 2
    dropout: float = 0.2

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.blocks < 1:
            raise ConfigError("need at least one block")

    @property
    def d_h(self) -> int:
        return self.d // self.heads


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         additive_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    q, k, v: (..., S, d). The optional mask broadcasts against the
    (..., heads, S, S) score array; masked entries carry NEG_INF and underflow
    to exactly zero weight after the max-subtracted softmax.
    """
    *lead, s, d = q.shape
    d_h = d // heads
    dtype = q.data.dtype

    def split(x):
        x = T.reshape(x, (*lead, s, heads, d_h))
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return T.transpose(x, axes)  # (..., heads, S, d_h)

    qh, kh, vh = split(q), split(k), split(v)
    scale = T.constant(np.asarray(1.0 / np.sqrt(d_h), dtype=dtype), dtype=dtype)
    scores = T.matmul(qh, T.transpose(kh, list(range(len(lead))) + [len(lead), len(lead) + 2,
                                                                    len(lead) + 1])) * scale
    if additive_mask is not None:
        scores = scores + T.constant(additive_mask, dtype=dtype)
    weights = T.softmax_rows(scores)
    out = T.matmul(weights, vh)  # (..., heads, S, d_h)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    out = T.transpose(out, axes)
    return T.reshape(out, (*lead, s, d))


class Backbone:
    """Item table + positional table + causal self-attention blocks."""

    def __init__(self, cfg: BackboneConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.params = ParameterGroup()
        p = self.params

        table = rng.child("item_table").normal((cfg.num_items + 1, cfg.d), std=INIT_STD)
        table[0] = 0.0
        p.add("item_table", Tensor(table, dtype=dtype))
        pos = rng.child("pos_emb").normal((cfg.n + 1, cfg.d), std=INIT_STD)
        pos[0] = 0.0
        p.add("pos_emb", Tensor(pos, dtype=dtype))
        for layer in range(cfg.blocks):
            pre = f"block{layer}"
            for w in ("wq", "wk", "wv", "wo"):
                p.add(f"{pre}.attn.{w}",
                      Tensor(rng.child(f"{pre}.{w}").normal((cfg.d, cfg.d), std=INIT_STD),
                             dtype=dtype))
            for ln in ("ln1", "ln2"):
                p.add(f"{pre}.{ln}.gamma", Tensor(np.ones(cfg.d), dtype=dtype))
                p.add(f"{pre}.{ln}.beta", Tensor(np.zeros(cfg.d), dtype=dtype))
            p.add(f"{pre}.ffn.w1",
                  Tensor(rng.child(f"{pre}.w1").normal((cfg.d, cfg.d), std=INIT_STD), dtype=dtype))
            p.add(f"{pre}.ffn.b1", Tensor(np.zeros(cfg.d), dtype=dtype))
            p.add(f"{pre}.ffn.w2",
                  Tensor(rng.child(f"{pre}.w2").normal((cfg.d, cfg.d), std=INIT_STD), dtype=dtype))
            p.add(f"{pre}.ffn.b2", Tensor(np.zeros(cfg.d), dtype=dtype))

    @property
    def frozen(self) -> bool:
        return self.params["item_table"].frozen

    def freeze(self) -> None:
        """Mark every backbone tensor frozen; idempotent."""
        self.params.freeze_all()

    def clone(self, dtype=None) -> "Backbone":
        """Unfrozen deep copy (used by per-task finetuning policies)."""
        other = Backbone(self.cfg, Rng(0), dtype=dtype or self.dtype)
        other.params.load_arrays(self.params.state_arrays())
        return other

    # ------------------------------------------------------------------

    def embed_items(self, ids: np.ndarray) -> Tensor:
        return T.embedding_lookup(self.params["item_table"], ids)

    def _dropout(self, x: Tensor, rate: float, rng: Rng) -> Tensor:
        keep = (rng.uniform(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
        return x * T.constant(keep, dtype=x.data.dtype)

    def encode_sequence(self, emb: Tensor, pad_mask: np.ndarray,
                        train: bool = False, rng: Rng | None = None) -> Tensor:
        """Per-position hidden states for (possibly prompt-fused) embeddings.

        emb: (B, n, d) or (n, d); pad_mask: matching (B, n) or (n,) booleans,
        True where the slot is padding.
        """
        cfg = self.cfg
        squeeze = emb.data.ndim == 2
        if squeeze:
            emb = T.reshape(emb, (1, *emb.shape))
            pad_mask = np.asarray(pad_mask)[None, :]
        if emb.data.ndim != 3 or emb.shape[1] != cfg.n or emb.shape[2] != cfg.d:
            raise ShapeError(f"expected (B, {cfg.n}, {cfg.d}) embeddings, got {emb.shape}")
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if train and rng is None:
            raise ContractError("training forward needs an rng for dropout")

        real = T.constant((~pad_mask)[:, :, None].astype(emb.data.dtype), dtype=emb.data.dtype)
        # position ids by distance from the end: last slot -> 1
        pos_ids = np.arange(cfg.n, 0, -1, dtype=np.int64)
        pos = T.embedding_lookup(self.params["pos_emb"], pos_ids)
        x = (emb + pos) * real
        if train and cfg.dropout > 0:
            x = self._dropout(x, cfg.dropout, rng.child("emb"))

        # additive attention mask: causal and key-not-pad
        causal = np.tril(np.ones((cfg.n, cfg.n), dtype=bool))
        allowed = causal[None, None] & (~pad_mask)[:, None, None, :]
        add_mask = np.where(allowed, 0.0, T.NEG_INF).astype(emb.data.dtype)

        for layer in range(cfg.blocks):
            pre = f"block{layer}"
            q = T.matmul(x, self.params[f"{pre}.attn.wq"])
            k = T.matmul(x, self.params[f"{pre}.attn.wk"])
            v = T.matmul(x, self.params[f"{pre}.attn.wv"])
            attn = multi_head_attention(q, k, v, cfg.heads, add_mask)
            attn = T.matmul(attn, self.params[f"{pre}.attn.wo"])
            if train and cfg.dropout > 0:
                attn = self._dropout(attn, cfg.dropout, rng.child(f"{pre}.attn"))
            x = T.layer_norm(x + attn, self.params[f"{pre}.ln1.gamma"],
                             self.params[f"{pre}.ln1.beta"]) * real
            f = T.matmul(T.relu(T.matmul(x, self.params[f"{pre}.ffn.w1"])
                                + self.params[f"{pre}.ffn.b1"]),
                         self.params[f"{pre}.ffn.w2"]) + self.params[f"{pre}.ffn.b2"]
            if train and cfg.dropout > 0:
                f = self._dropout(f, cfg.dropout, rng.child(f"{pre}.ffn"))
            x = T.layer_norm(x + f, self.params[f"{pre}.ln2.gamma"],
                             self.params[f"{pre}.ln2.beta"]) * real
        if squeeze:
            x = T.reshape(x, x.shape[1:])
        return x

    def latents(self, emb: Tensor, pad_mask: np.ndarray,
                train: bool = False, rng: Rng | None = None) -> Tensor:
        """Behavior latent: hidden state of the last (most recent) slot."""
        hidden = self.encode_sequence(emb, pad_mask, train=train, rng=rng)
        return T.last_position(hidden)

    def user_latents(self, contexts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Evaluation path: latents plus a degenerate flag for all-pad rows."""
        emb = self.embed_items(contexts)
        latents = self.latents(emb, contexts == 0).data
        degenerate = (contexts == 0).all(axis=-1)
        return latents, degenerate

    def score_items(self, latent: np.ndarray, candidates) -> np.ndarray:
        """Dot-product scores of a latent against candidate item rows."""
        candidates = np.asarray(candidates, dtype=np.int64)
        if candidates.size == 0:
            raise ContractError("empty candidate list")
        table = self.params["item_table"].data
        if candidates.min() < 0 or candidates.max() >= table.shape[0]:
            raise IndexError(f"candidate ids outside [0, {table.shape[0]})")
        return table[candidates] @ np.asarray(latent, dtype=table.dtype)

    # ------------------------------------------------------------------

    def pretrain_step(self, inputs: np.ndarray, positives: np.ndarray,
                      negatives: np.ndarray, rng: Rng) -> Tensor:
        """Sampled-softmax-free BCE over every non-pad next-item position."""
        if self.frozen:
            raise ContractError("pretrain_step on a frozen backbone")
        dtype = self.dtype
        emb = self.embed_items(inputs)
        hidden = self.encode_sequence(emb, inputs == 0, train=True, rng=rng)
        pos_e = self.embed_items(positives)
        neg_e = self.embed_items(negatives)
        s_pos = T.sum_last(hidden * pos_e)
        s_neg = T.sum_last(hidden * neg_e)
        mask = (positives != 0).astype(dtype)
        count = max(float(mask.sum()), 1.0)
        terms = (T.softplus(-s_pos) + T.softplus(s_neg)) * T.constant(mask, dtype=dtype)
        return T.sum_all(terms) * T.constant(np.asarray(1.0 / count, dtype=dtype), dtype=dtype)
