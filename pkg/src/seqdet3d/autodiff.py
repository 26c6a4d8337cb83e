"""A small tape-based reverse-mode autodiff over dense numpy arrays.

Operations executed inside ``with Tape() as tape:`` are recorded when any
input requires a gradient; ``tape.backward(loss)`` then walks the record in
exact reverse order. Outside a tape the same functions just compute values,
which is what inference uses.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


def _stack() -> list:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def current_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of executed operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ValueError("backward on an empty tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
                    seen[k] = t
        # what remains are leaves
        for k, g in grads.items():
            seen[k].grad = g


def _record(value: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    tape = current_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, inputs, backward))
    return out


def _shape_error(op: str, a, b) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {np.shape(a)} and {np.shape(b)}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    try:
        out = av + bv
    except ValueError:
        raise _shape_error("add", av, bv) from None
    return _record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    try:
        out = av - bv
    except ValueError:
        raise _shape_error("sub", av, bv) from None
    return _record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def multiply(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    try:
        out = av * bv
    except ValueError:
        raise _shape_error("multiply", av, bv) from None
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def scale(a, c: float) -> Tensor:
    return _record(_val(a) * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    y = np.exp(_val(a))
    return _record(y, (a,), lambda g: (g * y,))


def minimum(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise _shape_error("minimum", av, bv)
    pick_a = av <= bv
    return _record(np.minimum(av, bv), (a, b), lambda g: (g * pick_a, g * ~pick_a))


def clip(a, lo: float, hi: float) -> Tensor:
    av = _val(a)
    inside = (av >= lo) & (av <= hi)
    return _record(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def relu(a) -> Tensor:
    av = _val(a)
    pos = av > 0
    return _record(av * pos, (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    x = _val(a)
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(y, (a,), back)


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    av = _val(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, np.asarray(value, dtype=av.dtype), av)
    except ValueError:
        raise _shape_error("masked_fill", av, mask) from None
    keep = ~mask
    return _record(out, (a,), lambda g: (_unbroadcast(g * keep, av.shape),))


# ----------------------------------------------------------------------------
# reductions and normalization


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return _record(np.sum(av, axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    x = _val(a)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _record(y, (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    x = _val(a)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    y = x - lse

    def back(g):
        p = np.exp(y)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _record(y, (a,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    xv, gv, bv = _val(x), _val(gain), _val(bias)
    if gv.shape != xv.shape[-1:] or bv.shape != xv.shape[-1:]:
        raise _shape_error("layer_norm", xv, gv)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + bv

    def back(g):
        d = xv.shape[-1]
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record(out, (x, gain, bias), back)


# ----------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise _shape_error("matmul", av, bv)
    try:
        out = av @ bv
    except ValueError:
        raise _shape_error("matmul", av, bv) from None

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2 and av.ndim > 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return _unbroadcast(ga, av.shape), gb

    return _record(out, (a, b), back)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def reshape(a, shape) -> Tensor:
    av = _val(a)
    try:
        out = av.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", av, shape) from None
    return _record(out, (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes) -> Tensor:
    av = _val(a)
    inv = np.argsort(axes)
    return _record(np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),))


def slice_(a, index) -> Tensor:
    av = _val(a)

    def back(g):
        z = np.zeros_like(av)
        z[index] = g
        return (z,)

    return _record(av[index], (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    vals = [_val(t) for t in tensors]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[v.shape for v in vals]}") from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), back)


def pad(a, widths) -> Tensor:
    av = _val(a)
    out = np.pad(av, widths)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, av.shape))
    return _record(out, (a,), lambda g: (g[index],))


def embedding_lookup(table, ids) -> Tensor:
    tv = _val(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise ValueError(f"embedding_lookup: ids outside [0, {tv.shape[0]})")

    def back(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tv.shape[-1]))
        return (gt,)

    return _record(tv[ids], (table,), back)


def segment_max(a, segment_ids, num_segments: int) -> Tensor:
    """Per-segment max over rows of a (N, D) tensor. Every segment must be non-empty."""
    av = _val(a)
    seg = np.asarray(segment_ids)
    n, d = av.shape
    if seg.shape != (n,):
        raise _shape_error("segment_max", av, seg)
    if num_segments == 0:
        return _record(np.zeros((0, d), av.dtype), (a,), lambda g: (np.zeros_like(av),))
    order = np.argsort(seg, kind="stable")
    ss = seg[order]
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    if len(starts) != num_segments or ss[0] != 0 or ss[-1] != num_segments - 1:
        raise ValueError("segment_max: every segment in [0, num_segments) needs at least one row")
    sorted_vals = av[order]
    out = np.maximum.reduceat(sorted_vals, starts, axis=0)

    def back(g):
        hit = sorted_vals == out[ss]
        rows = np.where(hit, np.arange(n)[:, None], n)
        first = np.minimum.reduceat(rows, starts, axis=0)  # (S, D) first argmax
        ga = np.zeros_like(av)
        cols = np.broadcast_to(np.arange(d), first.shape)
        ga[order[first], cols] = g
        return (ga,)

    return _record(out, (a,), back)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(_val(a).shape) >= rate) / (1.0 - rate)
    return multiply(a, keep.astype(_val(a).dtype))


def cross_entropy(logits, targets, ignore_index: int | None = None, reduction: str = "mean") -> Tensor:
    """Token cross-entropy over the last axis; ``mean`` averages non-ignored targets."""
    x = _val(logits)
    t = np.asarray(targets)
    if x.shape[:-1] != t.shape:
        raise _shape_error("cross_entropy", x, t)
    v = x.shape[-1]
    x2 = x.reshape(-1, v)
    t2 = t.reshape(-1)
    valid = np.ones_like(t2, dtype=bool) if ignore_index is None else t2 != ignore_index
    rows = np.flatnonzero(valid)
    xs = x2[rows]
    ts = t2[rows]
    m = xs.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = np.log(np.exp(xs - m).sum(axis=1)) + m[:, 0]
    picked = xs[np.arange(len(rows)), ts]
    per = lse - picked
    if reduction == "none":
        full = np.zeros(t2.shape, dtype=x.dtype)
        full[rows] = per
        out = full.reshape(t.shape)
    elif reduction == "mean":
        out = np.asarray(per.sum() / max(len(rows), 1), dtype=x.dtype)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def back(g):
        p = np.exp(xs - lse[:, None])
        p[np.arange(len(rows)), ts] -= 1.0
        if reduction == "mean":
            p *= g / max(len(rows), 1)
        else:
            p *= g.reshape(-1)[rows][:, None]
        gx = np.zeros_like(x2)
        gx[rows] = p
        return (gx.reshape(x.shape),)

    return _record(out, (logits,), back)


# ----------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
    no_decay: Callable[[str], bool] | None = None,
) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.value.shape:
            raise _shape_error(f"adamw_step[{name}]", p.value, g)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay and not (no_decay and no_decay(name)):
            p.value -= lr * weight_decay * p.value
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cosine_warmup_lr(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.10) -> float:
    """Linear warmup from 0 over the first fraction of steps, then cosine decay to 0."""
    if total_steps <= 0:
        return base_lr
    warm = warmup_fraction * total_steps
    if step < warm:
        return base_lr * step / warm
    if total_steps <= warm:
        return base_lr
    frac = min(1.0, (step - warm) / (total_steps - warm))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
