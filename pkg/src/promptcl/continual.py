"""Task-stream orchestration: pretrain, freeze, per-task tuning, baselines.

The continual policies are freeze configurations over the same machinery:

* pcl            frozen backbone + item table, per-task prompts (+ adapter)
* adapter-only   frozen backbone, adapter only
* sinmo          one shared model finetuned through every task in sequence
* fineall        per-task full finetune starting from the pretrained weights
* sasrec-per-task  per-task full training from scratch

Per-task randomness always comes from streams labeled by task id, never by
stream position, so a task's training is bit-identical wherever it lands in
the order (given independent prompt init).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .config import RunConfig
from .data import (Dataset, LeaveOneOutSplit, TaskSpec, exclusion_sets,
                   fraction_split, leave_one_out)
from .errors import ConfigError, ContractError
from .metrics import RankingProtocol, accuracy, hit_ratio_at_k
from .optim import Adam, ParameterGroup
from .prompts import (ContextualAttention, PromptBankEntry, contextual_prompts,
                      embed_task_descriptions, fuse_contextual,
                      fuse_position_prompts, init_prompt_for_task)
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class FreezePolicy:
    name: str
    backbone_frozen: bool
    item_table_frozen: bool
    prompts_enabled: bool
    adapter_enabled: bool
    clone_per_task: bool
    scratch_init: bool = False


POLICIES = {
    "pcl": FreezePolicy("pcl", True, True, True, True, False),
    "adapter-only": FreezePolicy("adapter-only", True, True, False, True, False),
    "sinmo": FreezePolicy("sinmo", False, False, False, True, False),
    "fineall": FreezePolicy("fineall", False, False, False, True, True),
    "sasrec-per-task": FreezePolicy("sasrec-per-task", False, False, False, True, True,
                                    scratch_init=True),
}


@dataclass
class TaskRecord:
    task_id: int
    order_index: int
    metrics: dict[str, float]
    val_metric: float
    epochs_run: int
    train_losses: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    trainable_counts: dict[str, int] = field(default_factory=dict)
    seconds: float = 0.0


@dataclass
class RunContext:
    """Everything a tune run needs besides the evolving state."""

    cfg: RunConfig
    dataset: Dataset
    loo: LeaveOneOutSplit
    protocol: RankingProtocol
    root_rng: Rng


def make_context(cfg: RunConfig, dataset: Dataset) -> RunContext:
    protocol = RankingProtocol(cfg.protocol, cfg.eval_negatives, seed=cfg.seed)
    return RunContext(cfg, dataset, leave_one_out(dataset, cfg.n), protocol, Rng(cfg.seed))


class ContinualState:
    """Frozen backbone plus every per-task artifact needed for inference."""

    def __init__(self, backbone: Backbone, t1_loo: LeaveOneOutSplit,
                 policy: FreezePolicy, cold_items: np.ndarray | None = None,
                 t1_record: TaskRecord | None = None):
        self.backbone = backbone
        self.t1_loo = t1_loo
        self.policy = policy
        self.bank: dict[int, PromptBankEntry] = {}
        self.history: list[TaskRecord] = []
        self.task_models: dict[int, dict[str, np.ndarray]] = {}
        self.task_adapters: dict[int, dict[str, np.ndarray]] = {}
        self.shared_model: Backbone | None = None
        self.shared_ctx: dict[str, np.ndarray] | None = None
        self.cold_items = cold_items if cold_items is not None else np.array([], dtype=np.int64)
        self.last_prompt: np.ndarray | None = None
        self.t1_record = t1_record
        if t1_record is not None:
            self.history.append(t1_record)

    def fresh_run(self, policy: FreezePolicy | None = None) -> "ContinualState":
        """New downstream run over the same pretrained backbone."""
        return ContinualState(self.backbone, self.t1_loo, policy or self.policy,
                              self.cold_items, self.t1_record)

    def completed(self) -> list[int]:
        return [r.task_id for r in self.history]


# ---------------------------------------------------------------------------
# pretraining (task 1)


def _next_item_batches(contexts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing pairs from left-padded contexts: inputs and next items."""
    inputs = np.concatenate([np.zeros((contexts.shape[0], 1), dtype=np.int64),
                             contexts[:, :-1]], axis=1)
    positives = np.where(inputs != 0, contexts, 0)
    return inputs, positives


def _sample_negatives(stream: Rng, forbidden: np.ndarray, num_items: int) -> np.ndarray:
    """Uniform ids in 1..num_items, redrawn wherever they hit the positive."""
    negs = stream.integers(1, num_items + 1, forbidden.shape)
    while True:
        clash = (negs == forbidden) & (forbidden != 0)
        if not clash.any():
            break
        negs[clash] = stream.integers(1, num_items + 1, (int(clash.sum()),))
    return np.where(forbidden != 0, negs, 0)


class _EarlyStopper:
    def __init__(self, patience: int, min_epochs: int = 0):
        self.patience = patience
        self.min_epochs = min_epochs
        self.best = -np.inf
        self.best_epoch = -1

    def update(self, value: float, epoch: int) -> bool:
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch + 1 > self.min_epochs and epoch - self.best_epoch >= self.patience


def _t1_metrics(backbone: Backbone, loo: LeaveOneOutSplit, protocol: RankingProtocol,
                stage: str = "test") -> dict[str, float]:
    contexts = loo.test_contexts if stage == "test" else loo.val_contexts
    targets = loo.test_targets if stage == "test" else loo.val_targets
    latents, _ = backbone.user_latents(contexts)
    table = backbone.params["item_table"].data
    excl = exclusion_sets(contexts)
    excl = [e - {int(t)} for e, t in zip(excl, targets)]
    return {"hr@5": hit_ratio_at_k(latents, targets, table, protocol, 5, excl),
            "hr@10": hit_ratio_at_k(latents, targets, table, protocol, 10, excl)}


def pretrain_backbone(cfg: RunConfig, dataset: Dataset,
                      rng: Rng | None = None) -> tuple[Backbone, TaskRecord]:
    """Train the next-item backbone on a dataset's leave-one-out contexts."""
    start = time.perf_counter()
    rng = rng or Rng(cfg.seed)
    loo = leave_one_out(dataset, cfg.n)
    bb_cfg = BackboneConfig(dataset.num_items, cfg.d, cfg.n, cfg.blocks, cfg.heads, cfg.dropout)
    backbone = Backbone(bb_cfg, rng.child("backbone.init"))
    protocol = RankingProtocol(cfg.protocol, cfg.eval_negatives, seed=cfg.seed)
    opt = Adam(backbone.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    inputs_all, positives_all = _next_item_batches(loo.train_contexts)
    num_users = inputs_all.shape[0]

    stopper = _EarlyStopper(cfg.patience, cfg.min_epochs)
    best_arrays = None
    losses, curve = [], []
    epochs_run = 0
    for epoch in range(cfg.epochs):
        epochs_run = epoch + 1
        erng = rng.child(f"pretrain.epoch{epoch}")
        perm = erng.child("shuffle").permutation(num_users)
        neg_stream = erng.child("neg")
        epoch_loss, batches = 0.0, 0
        for lo in range(0, num_users, cfg.batch):
            idx = perm[lo:lo + cfg.batch]
            x, pos = inputs_all[idx], positives_all[idx]
            neg = _sample_negatives(neg_stream, pos, dataset.num_items)
            loss = backbone.pretrain_step(x, pos, neg, erng.child(f"drop{lo}"))
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        losses.append(epoch_loss / batches)
        val = _t1_metrics(backbone, loo, protocol, stage="val")["hr@5"]
        curve.append(val)
        if stopper.update(val, epoch):
            best_arrays = {k: v.copy() for k, v in backbone.params.state_arrays().items()}
        if stopper.should_stop(epoch):
            break
    if best_arrays is not None:
        backbone.params.load_arrays(best_arrays)

    metrics = _t1_metrics(backbone, loo, protocol, stage="test")
    record = TaskRecord(1, 1, metrics, stopper.best, epochs_run, losses, curve,
                        {"backbone": backbone.params.count()},
                        time.perf_counter() - start)
    return backbone, record


def freeze_after_pretrain(backbone: Backbone, cold_items: np.ndarray | None = None) -> None:
    """Zero any cold-item rows, then freeze every backbone tensor."""
    if cold_items is not None and len(cold_items):
        backbone.params["item_table"].data[cold_items] = 0.0
    backbone.freeze()


# ---------------------------------------------------------------------------
# downstream helpers


def task_user_split(ctx: RunContext, task_id: int):
    rng = Rng(ctx.cfg.seed).child(f"task{task_id}.split")
    return fraction_split(len(ctx.loo.kept), rng, ctx.cfg.split_fractions)


def _attr_ids(dataset: Dataset, contexts: np.ndarray) -> np.ndarray:
    return dataset.item_attrs[contexts]


def _cold_ids(contexts: np.ndarray, cold_items: np.ndarray) -> np.ndarray:
    """Map ids so only cold items survive; everything else becomes padding."""
    if not len(cold_items):
        return np.zeros_like(contexts)
    mask = np.isin(contexts, cold_items)
    return np.where(mask, contexts, 0)


def init_adapter(kind: str, d: int, classes: int, hidden: int, rng: Rng) -> dict[str, Tensor]:
    if kind == "linear":
        return {"w": Tensor(rng.child("w").normal((d, classes), std=0.02)),
                "b": Tensor(np.zeros(classes))}
    if kind == "mlp":
        return {"w1": Tensor(rng.child("w1").normal((d, hidden), std=0.02)),
                "b1": Tensor(np.zeros(hidden)),
                "w2": Tensor(rng.child("w2").normal((hidden, classes), std=0.02)),
                "b2": Tensor(np.zeros(classes))}
    raise ConfigError(f"unknown adapter kind {kind!r}")


def adapter_forward(params: dict[str, Tensor], latents: Tensor) -> Tensor:
    if "w1" in params:
        h = T.relu(T.matmul(latents, params["w1"]) + params["b1"])
        return T.matmul(h, params["w2"]) + params["b2"]
    return T.matmul(latents, params["w"]) + params["b"]


def _const_adapter(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: T.constant(v) for k, v in arrays.items()}


def prompted_latents(backbone: Backbone, contexts: np.ndarray, *,
                     prompt: np.ndarray | None = None,
                     ctx_prompt: np.ndarray | None = None, lam: float = 0.0,
                     t: int = 1, attr_table: np.ndarray | None = None,
                     attr_ids: np.ndarray | None = None,
                     cold_table: np.ndarray | None = None,
                     cold_items: np.ndarray | None = None) -> np.ndarray:
    """Evaluation-path latents under a task's stored artifacts."""
    emb = backbone.embed_items(contexts)
    if cold_table is not None:
        emb = emb + T.embedding_lookup(T.constant(cold_table),
                                       _cold_ids(contexts, cold_items))
    if prompt is not None:
        emb = fuse_position_prompts(emb, T.constant(prompt), t)
    if ctx_prompt is not None and lam != 0.0:
        emb = fuse_contextual(emb, T.constant(ctx_prompt), lam, t)
    if attr_table is not None:
        emb = emb + T.embedding_lookup(T.constant(attr_table), attr_ids)
    return backbone.latents(emb, contexts == 0).data


def _entry_latents(state: ContinualState, ctx: RunContext, entry: PromptBankEntry,
                   contexts: np.ndarray) -> np.ndarray:
    return prompted_latents(
        state.backbone, contexts,
        prompt=entry.prompt, ctx_prompt=entry.ctx_prompt, lam=entry.lam, t=entry.t,
        attr_table=entry.attr_table,
        attr_ids=_attr_ids(ctx.dataset, contexts) if entry.attr_table is not None else None,
        cold_table=entry.cold_table, cold_items=state.cold_items)


def _effective_table(state: ContinualState, entry: PromptBankEntry | None) -> np.ndarray:
    table = state.backbone.params["item_table"].data
    if entry is not None and entry.cold_table is not None:
        table = table + entry.cold_table
    return table


def _link_metrics(latents: np.ndarray, targets: np.ndarray, table: np.ndarray,
                  contexts: np.ndarray, protocol: RankingProtocol) -> dict[str, float]:
    excl = exclusion_sets(contexts)
    excl = [e - {int(t)} for e, t in zip(excl, targets)]
    return {"hr@5": hit_ratio_at_k(latents, targets, table, protocol, 5, excl),
            "hr@10": hit_ratio_at_k(latents, targets, table, protocol, 10, excl)}


def evaluate_task(state: ContinualState, ctx: RunContext, task_id: int,
                  stage: str = "test") -> dict[str, float]:
    """Metrics for a completed task against the current state."""
    policy = state.policy
    if task_id == 1:
        backbone = state.shared_model if (policy.name == "sinmo"
                                          and state.shared_model is not None) else state.backbone
        return _t1_metrics(backbone, state.t1_loo, ctx.protocol,
                           stage="test" if stage == "test" else "val")

    task = ctx.dataset.task_by_id(task_id)
    train_idx, val_idx, test_idx = task_user_split(ctx, task_id)
    idx = test_idx if stage == "test" else val_idx
    contexts = ctx.loo.train_contexts[idx]
    labels = ctx.dataset.labels[task_id][ctx.loo.kept][idx]

    if policy.name in ("pcl", "adapter-only"):
        entry = state.bank.get(task_id)
        if entry is None:
            raise ContractError(f"task {task_id} has no bank entry")
        latents = _entry_latents(state, ctx, entry, contexts)
        if task.kind == "classification":
            logits = adapter_forward(_const_adapter(entry.adapter), T.constant(latents)).data
            return {"acc": accuracy(logits, labels)}
        return _link_metrics(latents, labels, _effective_table(state, entry),
                             contexts, ctx.protocol)

    # backbone-finetuning policies
    if policy.name == "sinmo":
        model = state.shared_model
    else:
        model = state.backbone.clone()
        model.params.load_arrays(state.task_models[task_id])
    latents, _ = model.user_latents(contexts)
    if task.kind == "classification":
        adapter = _const_adapter(state.task_adapters[task_id])
        logits = adapter_forward(adapter, T.constant(latents)).data
        return {"acc": accuracy(logits, labels)}
    return _link_metrics(latents, labels, model.params["item_table"].data,
                         contexts, ctx.protocol)


def primary_metric(task: TaskSpec) -> str:
    return "acc" if task.kind == "classification" else "hr@5"


# ---------------------------------------------------------------------------
# downstream training


def _ctx_rows(state: ContinualState, ctx: RunContext, task_id: int,
              provider: str | None = None):
    """Description-embedding rows visible to the active task, plus its row index."""
    cfg = ctx.cfg
    if cfg.ctx_scope == "all":
        specs = sorted(ctx.dataset.tasks, key=lambda s: s.id)
    else:
        done = [tid for tid in state.completed() if tid != task_id]
        specs = [ctx.dataset.task_by_id(tid) for tid in done]
        specs.append(ctx.dataset.task_by_id(task_id))
    rows = embed_task_descriptions(specs, provider or cfg.desc_provider, cfg.d,
                                   file_path=cfg.desc_file, seed=cfg.seed)
    row_idx = [s.id for s in specs].index(task_id)
    return rows, row_idx


def train_downstream(state: ContinualState, ctx: RunContext, task: TaskSpec,
                     order_index: int, *, prompts_on: bool, ctx_on: bool,
                     desc_provider: str | None = None,
                     track_curve: bool = False) -> TaskRecord:
    """Prompt/adapter tuning of one task against the frozen backbone."""
    start = time.perf_counter()
    cfg = ctx.cfg
    tid = task.id
    rng = ctx.root_rng.child(f"task{tid}")
    train_idx, val_idx, test_idx = task_user_split(ctx, tid)
    contexts_all = ctx.loo.train_contexts
    labels_all = ctx.dataset.labels[tid][ctx.loo.kept]
    use_attrs = tid in cfg.attr_tasks and ctx.dataset.num_attrs > 0
    use_cold = len(state.cold_items) > 0

    trainables = ParameterGroup()
    prompt = None
    if prompts_on:
        init = init_prompt_for_task(order_index, state.last_prompt, cfg.n, cfg.d,
                                    rng.child("prompt.init"), cfg.init)
        prompt = trainables.add("prompt", Tensor(init))
    attn = None
    e_rows = row_idx = None
    if prompts_on and ctx_on:
        e_rows, row_idx = _ctx_rows(state, ctx, tid, desc_provider)
        attn = ContextualAttention(cfg.d, cfg.heads, rng.child("ctx.init"))
        if cfg.ctx_shared and state.shared_ctx is not None:
            for name, w in attn.weights.items():
                w.data = state.shared_ctx[name].copy()
        for name, w in attn.weights.items():
            trainables.add(f"ctx.{name}", w)
    adapter = None
    if task.kind == "classification":
        if not state.policy.adapter_enabled:
            raise ConfigError(f"policy {state.policy.name} cannot train classification "
                              f"task {tid} without an adapter")
        adapter = init_adapter(cfg.adapter, cfg.d, task.label_count, cfg.adapter_hidden,
                               rng.child("adapter.init"))
        for name, p in adapter.items():
            trainables.add(f"adapter.{name}", p)
    attr_table = None
    if use_attrs:
        attr_table = trainables.add(
            "attr_table", Tensor(np.zeros((ctx.dataset.num_attrs + 1, cfg.d))))
    cold_table = None
    if use_cold:
        cold_table = trainables.add(
            "cold_table", Tensor(np.zeros((ctx.dataset.num_items + 1, cfg.d))))
    if not trainables.trainable():
        raise ConfigError(f"policy {state.policy.name} leaves nothing trainable "
                          f"on {task.kind} task {tid}")

    opt = Adam(trainables, lr=cfg.tune_lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    frozen_table = state.backbone.params["item_table"]

    def batch_loss(idx: np.ndarray, neg_stream: Rng) -> Tensor:
        contexts = contexts_all[idx]
        emb = state.backbone.embed_items(contexts)
        if cold_table is not None:
            emb = emb + T.embedding_lookup(cold_table, _cold_ids(contexts, state.cold_items))
        if prompt is not None:
            emb = fuse_position_prompts(emb, prompt, cfg.t)
        if attn is not None:
            p_all = contextual_prompts(T.constant(e_rows), attn)
            emb = fuse_contextual(emb, T.select_row(p_all, row_idx), cfg.lam, cfg.t)
        if attr_table is not None:
            emb = emb + T.embedding_lookup(attr_table, _attr_ids(ctx.dataset, contexts))
        latents = state.backbone.latents(emb, contexts == 0)
        if task.kind == "classification":
            return T.cross_entropy_mean(adapter_forward(adapter, latents), labels_all[idx])
        targets = labels_all[idx]
        negs = _sample_negatives(neg_stream, targets, ctx.dataset.num_items)
        pos_e = T.embedding_lookup(frozen_table, targets)
        neg_e = T.embedding_lookup(frozen_table, negs)
        if cold_table is not None:
            pos_e = pos_e + T.embedding_lookup(cold_table, _cold_ids(targets, state.cold_items))
            neg_e = neg_e + T.embedding_lookup(cold_table, _cold_ids(negs, state.cold_items))
        s_pos = T.sum_last(latents * pos_e)
        s_neg = T.sum_last(latents * neg_e)
        terms = T.softplus(-s_pos) + T.softplus(s_neg)
        scale = np.asarray(1.0 / len(idx), dtype=np.float32)
        return T.sum_all(terms) * T.constant(scale)

    def current_arrays() -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in trainables.items()}

    def entry_from(arrays: dict[str, np.ndarray]) -> PromptBankEntry:
        ctx_vec = None
        if attn is not None:
            frozen_attn = ContextualAttention(cfg.d, cfg.heads, Rng(0))
            for name, w in frozen_attn.weights.items():
                w.data = arrays[f"ctx.{name}"]
            ctx_vec = frozen_attn.forward(T.constant(e_rows)).data[row_idx].copy()
        adapter_arrays = None
        if adapter is not None:
            adapter_arrays = {n.split(".", 1)[1]: a for n, a in arrays.items()
                              if n.startswith("adapter.")}
        return PromptBankEntry(
            tid, arrays.get("prompt"), ctx_vec, cfg.lam if attn is not None else 0.0,
            cfg.t, adapter_arrays, arrays.get("attr_table"), arrays.get("cold_table"))

    def val_metric(arrays: dict[str, np.ndarray]) -> float:
        entry = entry_from(arrays)
        contexts = contexts_all[val_idx]
        latents = _entry_latents(state, ctx, entry, contexts)
        if task.kind == "classification":
            logits = adapter_forward(_const_adapter(entry.adapter), T.constant(latents)).data
            return accuracy(logits, labels_all[val_idx])
        return _link_metrics(latents, labels_all[val_idx],
                             _effective_table(state, entry), contexts,
                             ctx.protocol)["hr@5"]

    stopper = _EarlyStopper(cfg.patience, cfg.min_epochs)
    best_arrays = current_arrays()
    losses, curve = [], []
    epochs_run = 0
    for epoch in range(cfg.epochs):
        epochs_run = epoch + 1
        erng = rng.child(f"epoch{epoch}")
        perm = erng.child("shuffle").permutation(len(train_idx))
        neg_stream = erng.child("neg")
        epoch_loss, batches = 0.0, 0
        for lo in range(0, len(train_idx), cfg.batch):
            loss = batch_loss(train_idx[perm[lo:lo + cfg.batch]], neg_stream)
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        losses.append(epoch_loss / batches)
        val = val_metric(current_arrays())
        curve.append(val)
        if stopper.update(val, epoch):
            best_arrays = current_arrays()
        if not track_curve and stopper.should_stop(epoch):
            break

    entry = entry_from(best_arrays)
    state.bank[tid] = entry
    if prompt is not None:
        state.last_prompt = entry.prompt
    if cfg.ctx_shared and attn is not None:
        state.shared_ctx = {name: best_arrays[f"ctx.{name}"].copy()
                            for name in ("wq", "wk", "wv", "wo")}
    metrics = evaluate_task(state, ctx, tid, stage="test")
    record = TaskRecord(tid, order_index, metrics, stopper.best, epochs_run,
                        losses, curve,
                        {n: t.data.size for n, t in trainables.items()},
                        time.perf_counter() - start)
    state.history.append(record)
    return record


def train_finetune(state: ContinualState, ctx: RunContext, task: TaskSpec,
                   order_index: int) -> TaskRecord:
    """Full-model finetuning for the sinmo / fineall / sasrec baselines."""
    start = time.perf_counter()
    cfg = ctx.cfg
    tid = task.id
    policy = state.policy
    rng = ctx.root_rng.child(f"task{tid}")
    train_idx, val_idx, test_idx = task_user_split(ctx, tid)
    contexts_all = ctx.loo.train_contexts
    labels_all = ctx.dataset.labels[tid][ctx.loo.kept]

    if policy.name == "sinmo":
        if state.shared_model is None:
            state.shared_model = state.backbone.clone()
        model = state.shared_model
    elif policy.scratch_init:
        bb_cfg = BackboneConfig(ctx.dataset.num_items, cfg.d, cfg.n, cfg.blocks,
                                cfg.heads, cfg.dropout)
        model = Backbone(bb_cfg, rng.child("scratch.init"))
    else:
        model = state.backbone.clone()

    trainables = ParameterGroup()
    for name, p in model.params.items():
        trainables.add(name, p)
    adapter = None
    if task.kind == "classification":
        adapter = init_adapter(cfg.adapter, cfg.d, task.label_count, cfg.adapter_hidden,
                               rng.child("adapter.init"))
        for name, p in adapter.items():
            trainables.add(f"adapter.{name}", p)

    opt = Adam(trainables, lr=cfg.tune_lr, beta1=cfg.beta1, beta2=cfg.beta2,
               eps=cfg.adam_eps)

    def batch_loss(idx: np.ndarray, neg_stream: Rng, drop_rng: Rng) -> Tensor:
        contexts = contexts_all[idx]
        emb = model.embed_items(contexts)
        latents = model.latents(emb, contexts == 0, train=cfg.dropout > 0, rng=drop_rng)
        if task.kind == "classification":
            return T.cross_entropy_mean(adapter_forward(adapter, latents), labels_all[idx])
        targets = labels_all[idx]
        negs = _sample_negatives(neg_stream, targets, ctx.dataset.num_items)
        s_pos = T.sum_last(latents * model.embed_items(targets))
        s_neg = T.sum_last(latents * model.embed_items(negs))
        terms = T.softplus(-s_pos) + T.softplus(s_neg)
        return T.sum_all(terms) * T.constant(np.asarray(1.0 / len(idx), dtype=np.float32))

    def val_metric() -> float:
        contexts = contexts_all[val_idx]
        latents, _ = model.user_latents(contexts)
        if task.kind == "classification":
            logits = adapter_forward(_const_adapter(
                {k: v.data for k, v in adapter.items()}), T.constant(latents)).data
            return accuracy(logits, labels_all[val_idx])
        return _link_metrics(latents, labels_all[val_idx],
                             model.params["item_table"].data, contexts,
                             ctx.protocol)["hr@5"]

    stopper = _EarlyStopper(cfg.patience, cfg.min_epochs)
    best_arrays = {n: t.data.copy() for n, t in trainables.items()}
    losses, curve = [], []
    epochs_run = 0
    for epoch in range(cfg.epochs):
        epochs_run = epoch + 1
        erng = rng.child(f"epoch{epoch}")
        perm = erng.child("shuffle").permutation(len(train_idx))
        neg_stream = erng.child("neg")
        epoch_loss, batches = 0.0, 0
        for lo in range(0, len(train_idx), cfg.batch):
            loss = batch_loss(train_idx[perm[lo:lo + cfg.batch]], neg_stream,
                              erng.child(f"drop{lo}"))
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        losses.append(epoch_loss / batches)
        val = val_metric()
        curve.append(val)
        if stopper.update(val, epoch):
            best_arrays = {n: t.data.copy() for n, t in trainables.items()}
        if stopper.should_stop(epoch):
            break

    for name, t in trainables.items():
        t.data = best_arrays[name].copy()
    model_arrays = {n: a for n, a in best_arrays.items() if not n.startswith("adapter.")}
    if policy.clone_per_task:
        state.task_models[tid] = model_arrays
    if adapter is not None:
        state.task_adapters[tid] = {n.split(".", 1)[1]: a for n, a in best_arrays.items()
                                    if n.startswith("adapter.")}
    metrics = evaluate_task(state, ctx, tid, stage="test")
    record = TaskRecord(tid, order_index, metrics, stopper.best, epochs_run,
                        losses, curve,
                        {n: t.data.size for n, t in trainables.items()},
                        time.perf_counter() - start)
    state.history.append(record)
    return record


def run_task(state: ContinualState, ctx: RunContext, task: TaskSpec,
             order_index: int, **kwargs) -> TaskRecord:
    """Train one task under the state's policy and record its metrics."""
    if task.id != 1 and not state.history:
        raise ContractError("downstream tasks need the pretraining record first")
    if task.id == 1:
        raise ContractError("task 1 is trained by pretrain_backbone, not run_task")
    policy = state.policy
    if policy.name in ("pcl", "adapter-only"):
        if task.kind == "link" and policy.name == "adapter-only" and not len(state.cold_items):
            raise ConfigError("adapter-only on a link task leaves nothing trainable")
        kwargs.setdefault("prompts_on", policy.prompts_enabled)
        kwargs.setdefault("ctx_on", kwargs["prompts_on"] and ctx.cfg.ctx_enabled)
        return train_downstream(state, ctx, task, order_index, **kwargs)
    if kwargs:
        raise ConfigError(f"policy {policy.name} does not accept prompt options {sorted(kwargs)}")
    return train_finetune(state, ctx, task, order_index)


# ---------------------------------------------------------------------------
# sequences, audits, experiments


def validate_order(dataset: Dataset, order: list[int]) -> list[int]:
    """Order must be distinct downstream task ids; task 1 is not reorderable."""
    downstream = {t.id for t in dataset.downstream_tasks()}
    if 1 in order:
        raise ContractError("task 1 is the pretraining task and cannot be reordered")
    if len(set(order)) != len(order) or not set(order) <= downstream:
        raise ConfigError(f"order {order} must be distinct ids from {sorted(downstream)}")
    return order


def run_sequence(cfg: RunConfig, dataset: Dataset, pretrained: ContinualState,
                 order: list[int], **kwargs) -> tuple[ContinualState, list[TaskRecord]]:
    """Run downstream tasks in the given order on a fresh state."""
    validate_order(dataset, order)
    ctx = make_context(cfg, dataset)
    state = pretrained.fresh_run()
    records = []
    for pos, tid in enumerate(order, start=2):
        records.append(run_task(state, ctx, dataset.task_by_id(tid), pos, **kwargs))
    return state, records


def forgetting_audit(state: ContinualState, ctx: RunContext) -> list[dict]:
    """Recorded-vs-current metric deltas for every task completed before the last."""
    if len(state.history) < 2:
        return []
    rows = []
    for record in state.history[:-1]:
        current = evaluate_task(state, ctx, record.task_id, stage="test")
        for name, recorded in sorted(record.metrics.items()):
            rows.append({"task": record.task_id, "metric": name,
                         "recorded": recorded, "current": current[name],
                         "delta": current[name] - recorded})
    return rows


def pretrain_state(cfg: RunConfig, dataset: Dataset,
                   policy_name: str | None = None) -> tuple[ContinualState, TaskRecord]:
    """Pretrain task 1, freeze, and wrap into a fresh continual state."""
    policy = POLICIES[policy_name or cfg.policy]
    backbone, record = pretrain_backbone(cfg, dataset)
    freeze_after_pretrain(backbone)
    state = ContinualState(backbone, leave_one_out(dataset, cfg.n), policy,
                           t1_record=record)
    return state, record


def run_ablation(cfg: RunConfig, dataset: Dataset, pretrained: ContinualState,
                 variants=("full", "no_ctx", "no_plm")) -> dict[str, list[TaskRecord]]:
    """Side-by-side downstream runs: full, without contextual prompts, and
    with seeded-random description rows instead of text-derived ones."""
    order = sorted(t.id for t in dataset.downstream_tasks())
    out: dict[str, list[TaskRecord]] = {}
    for variant in variants:
        if variant == "full":
            _, records = run_sequence(cfg, dataset, pretrained, order)
        elif variant == "no_ctx":
            _, records = run_sequence(cfg, dataset, pretrained, order, ctx_on=False)
        elif variant == "no_plm":
            _, records = run_sequence(cfg, dataset, pretrained, order,
                                      desc_provider="random")
        else:
            raise ConfigError(f"unknown ablation variant {variant!r}")
        out[variant] = records
    return out


def coldstart_runs(cfg: RunConfig, dataset: Dataset,
                   fraction: float) -> dict[str, list[TaskRecord]]:
    """Paired cold-start runs: prompts on vs. off, both training cold rows.

    The pretraining stream drops the cold items; downstream tasks keep them
    and finetune their (zeroed) embedding rows alongside the usual per-task
    artifacts. With fraction 0 this reduces bit-exactly to a normal tune run.
    """
    from .data import mask_cold_start

    masked, cold = mask_cold_start(dataset, fraction, cfg.seed)
    backbone, t1_record = pretrain_backbone(cfg, masked)
    freeze_after_pretrain(backbone, cold)
    t1_loo = leave_one_out(masked, cfg.n)
    order = sorted(t.id for t in dataset.downstream_tasks())
    ctx = make_context(cfg, dataset)
    out: dict[str, list[TaskRecord]] = {}
    for variant, prompts_on in (("prompts", True), ("no_prompts", False)):
        state = ContinualState(backbone, t1_loo, POLICIES["pcl"], cold, t1_record)
        records = []
        for pos, tid in enumerate(order, start=2):
            records.append(train_downstream(
                state, ctx, dataset.task_by_id(tid), pos,
                prompts_on=prompts_on, ctx_on=prompts_on and cfg.ctx_enabled))
        out[variant] = records
    return out


def export_user_representations(state: ContinualState, ctx: RunContext,
                                task_ids: list[int]) -> tuple[np.ndarray, str]:
    """Concatenated prompted behavior latents for every user, plus a manifest."""
    blocks = []
    for tid in task_ids:
        if tid == 1:
            latents, _ = state.backbone.user_latents(ctx.loo.train_contexts)
        else:
            entry = state.bank.get(tid)
            if entry is None:
                raise ContractError(f"task {tid} has not been tuned in this state")
            latents = _entry_latents(state, ctx, entry, ctx.loo.train_contexts)
        blocks.append(latents.astype(np.float32))
    features = np.concatenate(blocks, axis=1)
    users = [ctx.dataset.users[i] for i in ctx.loo.kept]
    lines = [f"tasks\t{','.join(str(t) for t in task_ids)}",
             f"width\t{features.shape[1]}",
             f"users\t{len(users)}"]
    lines += [str(u) for u in users]
    return features, "\n".join(lines) + "\n"


def train_feature_classifier(features: np.ndarray, labels: np.ndarray,
                             split, classes: int, hidden: int, seed: int,
                             lr: float = 1e-2, epochs: int = 60,
                             batch: int = 128) -> tuple[float, int, list[float]]:
    """One-hidden-layer classifier on fixed features.

    Returns (test accuracy at the best-validation epoch, that epoch's index,
    validation curve).
    """
    train_idx, val_idx, test_idx = split
    rng = Rng(seed).child("feature_clf")
    dim = features.shape[1]
    params = ParameterGroup()
    w1 = params.add("w1", Tensor(rng.child("w1").normal((dim, hidden), std=0.02)))
    b1 = params.add("b1", Tensor(np.zeros(hidden)))
    w2 = params.add("w2", Tensor(rng.child("w2").normal((hidden, classes), std=0.02)))
    b2 = params.add("b2", Tensor(np.zeros(classes)))
    opt = Adam(params, lr=lr)

    def logits_np(idx) -> np.ndarray:
        x = features[idx].astype(np.float32)
        h = np.maximum(x @ w1.data + b1.data, 0)
        return h @ w2.data + b2.data

    best_val, best_epoch, best_arrays = -np.inf, 0, None
    curve = []
    for epoch in range(epochs):
        perm = rng.child(f"epoch{epoch}").permutation(len(train_idx))
        for lo in range(0, len(train_idx), batch):
            idx = train_idx[perm[lo:lo + batch]]
            x = T.constant(features[idx].astype(np.float32))
            h = T.relu(T.matmul(x, w1) + b1)
            loss = T.cross_entropy_mean(T.matmul(h, w2) + b2, labels[idx])
            loss.backward()
            opt.step()
        val = accuracy(logits_np(val_idx), labels[val_idx])
        curve.append(val)
        if val > best_val:
            best_val, best_epoch = val, epoch
            best_arrays = {n: t.data.copy() for n, t in params.items()}
    params.load_arrays(best_arrays)
    return accuracy(logits_np(test_idx), labels[test_idx]), best_epoch, curve


def prompt_memory_budget(cfg: RunConfig) -> tuple[int, int]:
    """(prompt parameter count, reference parameter count) for the budget claim.

    Prompts cost |T| * n * d; the reference is the nominal item table plus the
    backbone's own parameters.
    """
    d, n, blocks = cfg.d, cfg.n, cfg.blocks
    prompt_params = cfg.nominal_tasks * n * d
    backbone_params = (n + 1) * d + blocks * (6 * d * d + 6 * d)
    reference = cfg.nominal_items * d + backbone_params
    return prompt_params, reference
