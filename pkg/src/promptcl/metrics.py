"""Hit-ratio and accuracy under the two ranking protocols.

Ranks use the deterministic tie rule: rank = 1 + (strictly higher scores)
+ (equal scores with a lower item id). Batch-ranking samples negatives from a
per-user derived stream so results are independent of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .rng import Rng


@dataclass(frozen=True)
class RankingProtocol:
    mode: str = "all"      # all | batch
    negatives: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("all", "batch"):
            raise ContractError(f"unknown ranking protocol {self.mode!r}")
        if self.mode == "batch" and self.negatives < 1:
            raise ContractError("batch-ranking needs at least one negative")


def rank_of_target(scores: np.ndarray, candidate_ids: np.ndarray, target_id: int) -> int:
    """1-based rank of the target among the candidates."""
    candidate_ids = np.asarray(candidate_ids)
    pos = np.flatnonzero(candidate_ids == target_id)
    if len(pos) != 1:
        raise ContractError(f"target {target_id} must appear exactly once in candidates")
    s = scores[pos[0]]
    higher = int(np.sum(scores > s))
    tied_lower_id = int(np.sum((scores == s) & (candidate_ids < target_id)))
    return 1 + higher + tied_lower_id


def candidate_lists(targets: np.ndarray, num_items: int, protocol: RankingProtocol,
                    exclude: list[frozenset] | None = None) -> list[np.ndarray]:
    """Per-user candidate ids under a protocol.

    `exclude` holds each user's already-consumed items; they are removed from
    the pool (the target itself always stays).
    """
    lists = []
    for u, target in enumerate(targets):
        target = int(target)
        banned = exclude[u] if exclude is not None else frozenset()
        if protocol.mode == "all":
            pool = np.array([i for i in range(1, num_items + 1)
                             if i == target or i not in banned], dtype=np.int64)
            lists.append(pool)
        else:
            allowed = np.array([i for i in range(1, num_items + 1)
                                if i != target and i not in banned], dtype=np.int64)
            if len(allowed) < protocol.negatives:
                raise ContractError(f"user {u}: only {len(allowed)} negatives available, "
                                    f"need {protocol.negatives}")
            stream = Rng(protocol.seed).child(f"negatives.user{u}")
            negs = stream.sample_without_replacement(allowed, protocol.negatives)
            lists.append(np.concatenate([[target], negs]))
    return lists


def hit_ratio_at_k(latents: np.ndarray, targets: np.ndarray, item_table: np.ndarray,
                   protocol: RankingProtocol, k: int,
                   exclude: list[frozenset] | None = None) -> float:
    """Fraction of users whose target ranks within the top k candidates."""
    if k < 1:
        raise ContractError("k must be >= 1")
    num_items = item_table.shape[0] - 1
    cands = candidate_lists(targets, num_items, protocol, exclude)
    hits = 0
    for u, cand in enumerate(cands):
        if k > len(cand):
            raise ContractError(f"k={k} exceeds candidate count {len(cand)}")
        scores = item_table[cand] @ latents[u]
        if rank_of_target(scores, cand, int(targets[u])) <= k:
            hits += 1
    return hits / len(cands)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax matches; ties resolve to the lowest class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ShapeError(f"logits {logits.shape} do not match {len(labels)} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"labels outside [0, {logits.shape[1]})")
    return float(np.mean(np.argmax(logits, axis=1) == labels))
