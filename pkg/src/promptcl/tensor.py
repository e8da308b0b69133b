"""Reverse-mode autodiff over numpy arrays.

Single-threaded by contract: a graph is built per forward pass and consumed by
one backward() call. float32 is the working precision everywhere in the
package; tensors accept dtype=float64 so gradient-check harnesses can run
above float32 quantization noise. Reductions use numpy's fixed single-order
kernels, so identical inputs give bit-identical outputs.

Freeze semantics: a frozen tensor never receives gradient accumulation and no
graph edge is created through it, so its bytes are stable under any amount of
downstream training.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

NEG_INF = -1e9  # additive mask value; exp(NEG_INF - max) underflows to exactly 0.0


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """A dense array node in the autodiff graph.

    `requires_grad` marks leaves that want gradients; interior nodes inherit
    it from their parents. `frozen` overrides it: frozen tensors are treated
    as constants.
    """

    __slots__ = ("data", "grad", "requires_grad", "frozen", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        _check_finite(arr, name or "tensor input")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.frozen = False
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = self.name or "Tensor"
        return f"<{tag} shape={self.data.shape} grad={'yes' if self.requires_grad else 'no'}>"

    def item(self) -> float:
        return float(self.data)

    @property
    def live(self) -> bool:
        """True when gradients should flow into or through this tensor."""
        return self.requires_grad and not self.frozen

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.live:
            return
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate .grad on every live tensor reachable from this scalar."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # arithmetic sugar; scalars wrap into constant tensors of matching dtype
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), dtype=self.data.dtype)

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.data.dtype), dtype=self.data.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, dtype=np.float32, name=None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name, dtype=dtype)


def parameter(data, name=None, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, what: str) -> Tensor:
    _check_finite(out_data, what)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.frozen = False
    out.name = None
    out.requires_grad = any(p.live for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward, "add output")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward, "sub output")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward, "mul output")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes with numpy-style batch broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        a._accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _make(out_data, (a, b), backward, "matmul output")


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * (x.data > 0))

    return _make(out_data, (x,), backward, "relu output")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; derivative is sigmoid(x)."""
    out_data = np.log1p(np.exp(-np.abs(x.data))) + np.maximum(x.data, 0)

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-x.data))
        x._accumulate(g * sig)

    return _make(out_data, (x,), backward, "softplus output")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        s = out_data
        x._accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(out_data, (x,), backward, "softmax output")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine params must be shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = centered * inv_std
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        gamma._accumulate(_unbroadcast(g * xhat, gamma.data.shape))
        beta._accumulate(_unbroadcast(g, beta.data.shape))
        dxhat = g * gamma.data
        # d/dx of (x - mu) / sqrt(var + eps) with mu, var functions of x
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv_std
        x._accumulate(dx)

    return _make(out_data, (x, gamma, beta), backward, "layer_norm output")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather; id 0 is the padding row: zero output, no gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"ids outside [0, {table.data.shape[0]})")
    out_data = table.data[ids].copy()
    out_data[ids == 0] = 0

    def backward(g):
        if not table.live:
            return
        acc = np.zeros_like(table.data)
        flat_ids = ids.reshape(-1)
        flat_g = g.reshape(-1, table.data.shape[1])
        keep = flat_ids != 0
        np.add.at(acc, flat_ids[keep], flat_g[keep])
        table._accumulate(acc)

    return _make(out_data, (table,), backward, "embedding output")


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return _make(out_data, (x,), backward, "reshape output")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    out_data = np.transpose(x.data, axes).copy()

    def backward(g):
        x._accumulate(np.transpose(g, inverse))

    return _make(out_data, (x,), backward, "transpose output")


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.data.shape).astype(x.data.dtype))

    return _make(out_data, (x,), backward, "sum output")


def sum_last(x: Tensor) -> Tensor:
    """Reduce the last axis."""
    out_data = x.data.sum(axis=-1)

    def backward(g):
        x._accumulate(np.broadcast_to(g[..., None], x.data.shape).astype(x.data.dtype))

    return _make(out_data, (x,), backward, "sum_last output")


def last_position(x: Tensor) -> Tensor:
    """x[..., -1, :] — the hidden state of the final sequence slot."""
    if x.data.ndim < 2:
        raise ShapeError("last_position needs >=2-D input")
    out_data = x.data[..., -1, :].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., -1, :] = g
        x._accumulate(full)

    return _make(out_data, (x,), backward, "last_position output")


def select_row(x: Tensor, idx: int) -> Tensor:
    """Row `idx` of a 2-D tensor as a vector."""
    if x.data.ndim != 2:
        raise ShapeError("select_row needs a 2-D input")
    if not 0 <= idx < x.data.shape[0]:
        raise IndexError(f"row {idx} outside [0, {x.data.shape[0]})")
    out_data = x.data[idx].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accumulate(full)

    return _make(out_data, (x,), backward, "select_row output")


def cross_entropy_mean(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy of integer labels against rows of logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy_mean expects 2-D logits")
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels outside [0, {c})")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = m[:, 0] + np.log(e.sum(axis=-1))
    out_data = np.asarray((lse - logits.data[np.arange(n), labels]).mean(),
                          dtype=logits.data.dtype)

    def backward(g):
        probs = e / e.sum(axis=-1, keepdims=True)
        probs[np.arange(n), labels] -= 1.0
        logits._accumulate(g * probs / n)

    return _make(out_data, (logits,), backward, "cross_entropy output")
