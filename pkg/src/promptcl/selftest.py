"""Invariant self-checks runnable from the CLI (`promptcl selftest`).

The gradient checks run in float64 so the 1e-3 relative tolerance measures
the correctness of the backward formulas rather than float32 quantization.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .checkpoint import load_tensors, save_tensors
from .config import RunConfig
from .continual import adapter_forward, prompt_memory_budget
from .optim import Adam, ParameterGroup
from .prompts import ContextualAttention, fuse_contextual, fuse_position_prompts
from .rng import Rng
from .tensor import Tensor


def finite_difference_grad(loss_fn, arrays: dict[str, np.ndarray],
                           h: float = 1e-3) -> dict[str, np.ndarray]:
    """Central differences of a pure function of named arrays."""
    grads = {}
    for name, base in arrays.items():
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_fn(arrays)
            flat[i] = orig - h
            lo = loss_fn(arrays)
            flat[i] = orig
            g.reshape(-1)[i] = (hi - lo) / (2 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def build_tiny_pipeline(seed: int = 3):
    """Frozen tiny backbone + the full prompt-tuned classification loss.

    Returns (loss_fn over trainable arrays, analytic_grads fn, initial arrays).
    Sized per the gradient-check contract: d=4, n=6, one block, two heads,
    fusion window 3.
    """
    d, n, heads, t, num_items, batch, classes = 4, 6, 2, 3, 12, 5, 3
    lam = 0.1
    rng = Rng(seed)
    backbone = Backbone(BackboneConfig(num_items, d, n, 1, heads, dropout=0.0),
                        rng.child("backbone"), dtype=np.float64)
    backbone.freeze()
    contexts = rng.child("contexts").integers(1, num_items + 1, (batch, n))
    contexts[0, :3] = 0
    contexts[1, :1] = 0
    labels = rng.child("labels").integers(0, classes, (batch,))
    e_rows = rng.child("desc").normal((3, d))
    row_idx = 1

    init = {
        "prompt": rng.child("prompt").normal((n, d), std=0.02),
        "ctx.wq": rng.child("wq").normal((d, d), std=0.02),
        "ctx.wk": rng.child("wk").normal((d, d), std=0.02),
        "ctx.wv": rng.child("wv").normal((d, d), std=0.02),
        "ctx.wo": rng.child("wo").normal((d, d), std=0.02),
        "adapter.w": rng.child("aw").normal((d, classes), std=0.02),
        "adapter.b": np.zeros(classes),
    }

    def forward(arrays: dict[str, np.ndarray], want_grads: bool):
        params = {name: Tensor(a, requires_grad=want_grads, dtype=np.float64)
                  for name, a in arrays.items()}
        attn = ContextualAttention(d, heads, Rng(0), dtype=np.float64)
        for key in ("wq", "wk", "wv", "wo"):
            attn.weights[key] = params[f"ctx.{key}"]
        emb = backbone.embed_items(contexts)
        emb = fuse_position_prompts(emb, params["prompt"], t)
        p_all = attn.forward(T.constant(e_rows, dtype=np.float64))
        emb = fuse_contextual(emb, T.select_row(p_all, row_idx), lam, t)
        latents = backbone.latents(emb, contexts == 0)
        logits = adapter_forward({"w": params["adapter.w"], "b": params["adapter.b"]},
                                 latents)
        return T.cross_entropy_mean(logits, labels), params

    def loss_fn(arrays):
        loss, _ = forward(arrays, want_grads=False)
        return loss.item()

    def analytic_grads(arrays):
        loss, params = forward(arrays, want_grads=True)
        loss.backward()
        return {name: p.grad.copy() for name, p in params.items()}

    return loss_fn, analytic_grads, init


def _check_primitive_grads() -> float:
    """FD check over a composition touching every differentiable primitive."""
    rng = Rng(11)
    arrays = {
        "a": rng.child("a").normal((3, 4)),
        "b": rng.child("b").normal((4, 2)),
        "gamma": 1.0 + 0.1 * rng.child("g").normal((4,)),
        "beta": 0.1 * rng.child("be").normal((4,)),
        "table": rng.child("t").normal((5, 4)),
    }
    ids = np.array([1, 4, 2])

    def forward(arrs, want):
        p = {k: Tensor(v, requires_grad=want, dtype=np.float64) for k, v in arrs.items()}
        x = T.layer_norm(p["a"] + T.embedding_lookup(p["table"], ids),
                         p["gamma"], p["beta"])
        y = T.matmul(T.softmax_rows(x), p["b"])
        z = T.softplus(T.relu(y) + y * y)
        return T.sum_all(z), p

    def loss_fn(arrs):
        return forward(arrs, False)[0].item()

    loss, params = forward(arrays, True)
    loss.backward()
    fd = finite_difference_grad(loss_fn, arrays)
    return max(max_relative_error(params[name].grad, fd[name]) for name in arrays)


def run_selftest(cfg: RunConfig | None = None, log=print) -> bool:
    """Run the invariant suite; prints one PASS/FAIL line per check."""
    cfg = cfg or RunConfig()
    results: list[tuple[str, bool, str]] = []

    err = _check_primitive_grads()
    results.append(("primitive-gradients", err < 1e-3, f"max rel err {err:.2e}"))

    loss_fn, analytic, init = build_tiny_pipeline()
    ana = analytic(init)
    # h=1e-4 keeps O(h^2) truncation well below the tolerance in float64
    fd = finite_difference_grad(loss_fn, init, h=1e-4)
    err = max(max_relative_error(ana[k], fd[k]) for k in init)
    results.append(("composed-loss-gradients", err < 1e-3, f"max rel err {err:.2e}"))

    x = Rng(5).normal((8, 16)) * 100
    s = T.softmax_rows(Tensor(x)).data
    ok = np.all(np.abs(s.sum(axis=-1) - 1.0) < 1e-6)
    results.append(("softmax-rows-sum", bool(ok), "within 1e-6"))

    ln = T.layer_norm(Tensor(Rng(6).normal((4, 8))), Tensor(np.ones(8)),
                      Tensor(np.zeros(8))).data
    ok = np.all(np.abs(ln.mean(axis=-1)) < 1e-5)
    results.append(("layer-norm-mean", bool(ok), "|mean| < 1e-5"))

    theta = Tensor(np.zeros(1), requires_grad=True)
    group = ParameterGroup()
    group.add("theta", theta)
    theta.grad = np.ones(1, dtype=np.float32)
    Adam(group).step()
    ok = abs(float(theta.data[0]) + 1e-3) < 1e-6
    results.append(("adam-single-step", ok, f"theta={float(theta.data[0]):.2e}"))

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "roundtrip.pclt"
        tensors = {"a": Rng(7).normal((3, 5)).astype(np.float32),
                   "b": Rng(8).normal((2,)).astype(np.float32)}
        save_tensors(path, tensors)
        loaded = load_tensors(path)
        ok = all(np.array_equal(tensors[k], loaded[k]) for k in tensors)
        results.append(("pclt-roundtrip", ok, "bit-exact"))

    prompt_params, reference = prompt_memory_budget(cfg)
    ratio = prompt_params / reference
    log(f"prompt parameters: {prompt_params}")
    log(f"item table + backbone parameters: {reference}")
    results.append(("prompt-memory-budget", ratio < 0.05, f"ratio {ratio:.4f} < 0.05"))

    all_ok = True
    for name, ok, detail in results:
        log(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        all_ok = all_ok and ok
    return all_ok
