"""Per-task prompts: position-wise sequences, contextual vectors, fusion.

A position-wise prompt is an (n, d) trainable sheet added element-wise to the
last `t` item embeddings of every sequence while its task is active, then
frozen. A contextual prompt is a d-vector produced by multi-head
self-attention over the task-description embedding rows; the active task's
row is snapshotted when the task finishes and never recomputed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import INIT_STD, multi_head_attention
from .checkpoint import load_tensors
from .errors import ConfigError, ContractError, LoadError
from .rng import Rng
from .tensor import Tensor

PROMPT_INIT_STD = 0.02


def window_mask(n: int, t: int, dtype=np.float32) -> np.ndarray:
    """(n, 1) column marking the last t positions."""
    if t > n:
        raise ContractError(f"fusion window t={t} exceeds sequence length n={n}")
    if t < 1:
        raise ContractError("fusion window must be >= 1")
    mask = np.zeros((n, 1), dtype=dtype)
    mask[n - t:] = 1.0
    return mask


def fuse_position_prompts(emb: Tensor, prompt: Tensor, t: int) -> Tensor:
    """Add the last t prompt rows onto the last t embedding rows.

    emb: (..., n, d); prompt: (n, d). Positions before n-t pass through
    bit-identically.
    """
    n = prompt.shape[0]
    mask = window_mask(n, t, dtype=emb.data.dtype)
    return emb + T.constant(mask, dtype=emb.data.dtype) * prompt


def fuse_contextual(emb: Tensor, ctx_prompt: Tensor, lam: float, t: int) -> Tensor:
    """Broadcast-add lam * ctx_prompt onto the last t positions of emb."""
    n = emb.shape[-2]
    mask = window_mask(n, t, dtype=emb.data.dtype) * np.asarray(lam, dtype=emb.data.dtype)
    return emb + T.constant(mask, dtype=emb.data.dtype) * ctx_prompt


def feature_sequence_fusion(emb: Tensor, attr_emb: Tensor) -> Tensor:
    """Element-wise add of an attribute embedding sequence across all positions."""
    if emb.shape != attr_emb.shape:
        raise ConfigError(f"attribute sequence shape {attr_emb.shape} != {emb.shape}")
    return emb + attr_emb


# ---------------------------------------------------------------------------
# task description embeddings


def _hash_row(text: str, d: int) -> np.ndarray:
    """Deterministic unit-norm pseudo-embedding: sha256 -> seeded normal."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    row = Rng(seed).normal((d,))
    return (row / np.linalg.norm(row)).astype(np.float32)


def embed_task_descriptions(specs, provider: str, d: int,
                            file_path=None, seed: int = 0) -> np.ndarray:
    """(K, d) description-embedding matrix for the given task specs.

    Providers: `hash` derives rows from the description text, `zero` disables
    semantic content, `file` loads rows named `task{id}` from a PCLT file,
    `random` draws seeded unit-norm rows ignoring the text (the no-encoder
    ablation).
    """
    rows = np.zeros((len(specs), d), dtype=np.float32)
    if provider == "zero":
        return rows
    if provider == "hash":
        for i, spec in enumerate(specs):
            rows[i] = _hash_row(spec.description, d)
        return rows
    if provider == "random":
        root = Rng(seed)
        for i, spec in enumerate(specs):
            row = root.child(f"task{spec.id}.desc").normal((d,))
            rows[i] = (row / np.linalg.norm(row)).astype(np.float32)
        return rows
    if provider == "file":
        if file_path is None:
            raise ConfigError("file provider needs a path")
        stored = load_tensors(file_path)
        for i, spec in enumerate(specs):
            key = f"task{spec.id}"
            if key not in stored:
                raise LoadError(f"{file_path}: no row for {key}")
            row = stored[key]
            if row.shape != (d,):
                raise LoadError(f"{file_path}: {key} has shape {row.shape}, expected ({d},)")
            rows[i] = row
        return rows
    raise ConfigError(f"unknown description provider {provider!r}")


# ---------------------------------------------------------------------------
# contextual attention


class ContextualAttention:
    """Multi-head self-attention over task rows; trained per active task."""

    def __init__(self, d: int, heads: int, rng: Rng, dtype=np.float32):
        if d % heads:
            raise ConfigError(f"d={d} not divisible by heads={heads}")
        self.d = d
        self.heads = heads
        self.weights = {
            name: Tensor(rng.child(name).normal((d, d), std=INIT_STD), dtype=dtype)
            for name in ("wq", "wk", "wv", "wo")
        }

    def named_weights(self):
        return [(f"ctx.{name}", w) for name, w in self.weights.items()]

    def forward(self, task_rows: Tensor) -> Tensor:
        """Contextual prompts for every task row: (K, d) -> (K, d)."""
        q = T.matmul(task_rows, self.weights["wq"])
        k = T.matmul(task_rows, self.weights["wk"])
        v = T.matmul(task_rows, self.weights["wv"])
        out = multi_head_attention(q, k, v, self.heads)
        return T.matmul(out, self.weights["wo"])


def contextual_prompts(task_rows: Tensor, attn: ContextualAttention) -> Tensor:
    if task_rows.shape[-1] != attn.d:
        raise ConfigError(f"task rows of width {task_rows.shape[-1]} vs attention d={attn.d}")
    return attn.forward(task_rows)


# ---------------------------------------------------------------------------
# prompt bank


@dataclass(frozen=True)
class PromptBankEntry:
    """Immutable per-task artifacts captured when the task finished."""

    task_id: int
    prompt: np.ndarray | None         # (n, d) position-wise prompt
    ctx_prompt: np.ndarray | None     # (d,) contextual snapshot
    lam: float
    t: int
    adapter: dict[str, np.ndarray] | None
    attr_table: np.ndarray | None     # (A + 1, d) when the task used attributes
    cold_table: np.ndarray | None     # (V + 1, d) cold-item deltas when enabled

    def __post_init__(self):
        for arr in (self.prompt, self.ctx_prompt, self.attr_table, self.cold_table):
            if arr is not None:
                arr.setflags(write=False)
        if self.adapter is not None:
            for arr in self.adapter.values():
                arr.setflags(write=False)


def init_prompt_for_task(order_pos: int, prev_prompt: np.ndarray | None,
                         n: int, d: int, rng: Rng, mode: str = "chain") -> np.ndarray:
    """Initial position-wise prompt for the task trained at `order_pos`.

    Position 2 (the first downstream task) always draws fresh normals; later
    positions copy the previous task's frozen prompt unless mode is `random`.
    """
    if order_pos < 2:
        raise ContractError("task 1 is self-supervised and carries no prompt")
    if mode not in ("chain", "random"):
        raise ConfigError(f"unknown prompt init mode {mode!r}")
    if mode == "random" or order_pos == 2:
        return rng.normal((n, d), std=PROMPT_INIT_STD).astype(np.float32)
    if prev_prompt is None:
        raise ContractError(f"chain init at position {order_pos} needs the previous prompt")
    return prev_prompt.astype(np.float32, copy=True)
