"""Small reverse-mode autodiff over numpy arrays, Adam, and gradient checking.

A :class:`Tensor` remembers the tensors it was computed from and a closure
that pushes its gradient back to them. :func:`backward` walks that graph in
reverse topological order. Only the operations the sequence classifiers and
the policy network need are provided.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn=None,
                 requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name})"

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, parents, backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementary operations ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))
    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))
    return _make(out_data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a.accumulate(g * c)
    return _make(a.data * c, (a,), backward)


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batching rules (leading dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.data.ndim > 2 and b.data.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b.accumulate(gb)
    return _make(out_data, (a, b), backward)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate(np.transpose(g, inverse))
    return _make(np.transpose(a.data, axes), (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)

    def backward(g):
        a.accumulate(g * s * (1.0 - s))
    return _make(s, (a,), backward)


def tanh_act(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)

    def backward(g):
        a.accumulate(g * (1.0 - t * t))
    return _make(t, (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out_data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])
    return _make(out_data, tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate(np.take(g, i, axis=axis))
    return _make(out_data, tensors, backward)


def take(a, key) -> Tensor:
    """Basic slicing/indexing (``a[key]``)."""
    a = as_tensor(a)
    out_data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g) if _is_advanced(key) else full.__setitem__(key, g)
        a.accumulate(full)
    return _make(out_data, (a,), backward)


def _is_advanced(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def reverse(a, axis: int) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a.accumulate(np.flip(g, axis=axis))
    return _make(np.flip(a.data, axis=axis).copy(), (a,), backward)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    p = softmax_rows(a.data)

    def backward(g):
        a.accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return _make(p, (a,), backward)


def total(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a.accumulate(np.broadcast_to(g, a.shape))
    return _make(np.asarray(a.data.sum()), (a,), backward)


def softmax_cross_entropy(logits, targets: Sequence[int], weights: Sequence[float] | None = None) -> Tensor:
    """Fused softmax + cross-entropy, averaged over rows.

    With ``weights`` each row's negative log-likelihood is multiplied by its
    weight before averaging (used for policy-gradient surrogates).
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=int)
    n = logits.shape[0]
    p = softmax_rows(logits.data)
    w = np.ones(n, dtype=p.dtype) if weights is None else np.asarray(weights, dtype=p.dtype)
    loss = -(w * np.log(np.maximum(p[np.arange(n), targets], LOG_FLOOR))).mean()

    def backward(g):
        d = p.copy()
        d[np.arange(n), targets] -= 1.0
        logits.accumulate(g * d * (w / n)[:, None])
    return _make(np.asarray(loss), (logits,), backward)


def softmax_entropy(logits) -> Tensor:
    """Mean Shannon entropy (nats) of the row-wise softmax of ``logits``."""
    logits = as_tensor(logits)
    n = logits.shape[0]
    p = softmax_rows(logits.data)
    logp = np.log(np.maximum(p, LOG_FLOOR))
    h = -(p * logp).sum(axis=-1)

    def backward(g):
        logits.accumulate(g * (-p * (logp + h[:, None])) / n)
    return _make(np.asarray(h.mean()), (logits,), backward)


# -- plain array helpers -----------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable logistic
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, targets: Sequence[int]) -> float:
    probs = np.asarray(probs)
    targets = np.asarray(targets, dtype=int)
    p = probs[np.arange(len(targets)), targets]
    return float(-np.log(np.maximum(p, LOG_FLOOR)).mean())


def cross_entropy_logit_grad(probs: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    d = np.array(probs, dtype=float, copy=True)
    d[np.arange(len(targets)), np.asarray(targets, dtype=int)] -= 1.0
    return d / len(targets)


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Reverse-mode sweep from ``root``; leaf gradients accumulate in ``.grad``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    if grad is None:
        grad = np.ones_like(root.data)
    root.grad = np.array(grad, dtype=root.data.dtype)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
            if node.parents:
                node.grad = None  # intermediate gradients are not kept


# -- parameters, optimiser -----------------------------------------------------

class ParamStore:
    """Named parameters with their gradient accumulators and Adam moments."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        value = np.array(value, dtype=self.dtype)
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return t

    def init_uniform(self, name: str, shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.params.items()}

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint lacks parameter {k}")
            a = np.asarray(arrays[k], dtype=self.dtype)
            if a.shape != t.data.shape:
                raise ValueError(f"parameter {k}: shape {a.shape} != {t.data.shape}")
            t.data = a.copy()

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for k, t in self.params.items():
            out.add(k, t.data)
        return out

    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip_norm: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))


def adam_step(store: ParamStore, cfg: OptimConfig, t: int | None = None, ascend: bool = False) -> None:
    """Bias-corrected Adam update; gradients are cleared afterwards.

    ``t`` is the 1-based step index (defaults to the store's own counter).
    """
    if t is None:
        store.step_count += 1
        t = store.step_count
    grads = store.grads()
    if cfg.grad_clip_norm is not None:
        norm = global_norm(grads.values())
        if norm > cfg.grad_clip_norm:
            factor = cfg.grad_clip_norm / norm
            grads = {k: g * factor for k, g in grads.items()}
    b1, b2 = cfg.beta1, cfg.beta2
    sign = 1.0 if ascend else -1.0
    for name, p in store.params.items():
        g = grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        update = sign * cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        if not np.all(np.isfinite(update)):
            raise FloatingPointError(f"non-finite Adam update for parameter {name!r}")
        p.data = p.data + update.astype(store.dtype)
    store.zero_grad()


# -- gradient checking ---------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """|a-b| / max(|a|, |b|, floor); the floor keeps near-zero gradients meaningful."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(loss_fn: Callable[[], Tensor], store: ParamStore, eps: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``max_entries`` caps how many entries per parameter are probed (chosen at
    random with ``seed``); ``None`` checks every entry.
    """
    if store.dtype != np.float64:
        raise TypeError("gradient checks need a float64 parameter store")
    store.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = store.grads()
    store.zero_grad()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0)
    for name, p in store.params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            numeric[j] = (up - down) / (2 * eps)
        err = float(relative_error(analytic[name].reshape(-1)[idx], numeric).max()) if len(idx) else 0.0
        report.per_param[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
        report.n_checked += len(idx)
    return report


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_VERSION = 1


def checkpoint_dict(store: ParamStore, header: dict) -> dict:
    head = {"version": CHECKPOINT_VERSION, **header}
    params = {k: {"shape": list(t.data.shape), "data": t.data.astype(np.float64).ravel().tolist()}
              for k, t in store.params.items()}
    return {"header": head, "params": params}


def save_checkpoint(path: str | Path, store: ParamStore, header: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(store, header), fh, sort_keys=True)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return parse_checkpoint(obj)


def parse_checkpoint(obj: dict) -> tuple[dict, dict[str, np.ndarray]]:
    header = obj["header"]
    arrays = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in obj["params"].items()}
    return header, arrays
