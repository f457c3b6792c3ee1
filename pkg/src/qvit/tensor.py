"""Dense float64 tensors with a tape-based reverse-mode autodiff engine.

The op set is deliberately small: the affine maps, activations,
normalisation, attention plumbing and cross-entropy a transformer encoder
needs, plus a few shape utilities. Each op registers a backward rule on the
active :class:`Tape`; replaying the tape in reverse accumulates gradients in
a fixed order, so single-threaded runs are bit-reproducible.

Everything is float64. There is no general broadcasting: elementwise ops
require equal shapes, and only ``affine`` / ``add_bias`` broadcast a bias
over leading axes. ``finite_diff_check`` is part of the public API because
the rest of the stack leans on it for verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

LAYER_NORM_EPS = 1e-5
PROB_CLAMP = 1e-12


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values that never receives gradients."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of one forward pass, replayed in reverse by backward().

    Use as a context manager around the forward computation. A tape can be
    replayed exactly once; gradient accumulation order equals recording
    order, which makes runs deterministic.
    """

    def __init__(self):
        self._entries: list[tuple[Callable[[], None], tuple[Tensor, ...]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out: Tensor, inputs: Sequence[Tensor], rule: Callable[[], None]) -> Tensor:
    """Mark ``out`` differentiable and register ``rule`` on the active tape.

    No-op when no input requires a gradient or no tape is active, so
    evaluation-mode forward passes carry no autodiff overhead.
    """
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        if _TAPE_STACK:
            _TAPE_STACK[-1]._entries.append((rule, tuple(inputs)))
    return out


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Populate .grad on every tensor reachable from ``loss`` through ``tape``.

    Returns a map from each requires_grad input tensor to its gradient.
    Raises on a non-scalar loss or on a second replay of the same tape.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if tape._consumed:
        raise RuntimeError("tape already replayed; record a fresh forward pass")
    tape._consumed = True
    loss.accumulate_grad(np.ones_like(loss.data))
    for rule, _ in reversed(tape._entries):
        rule()
    grads: dict[Tensor, np.ndarray] = {}
    for _, inputs in tape._entries:
        for t in inputs:
            if t.requires_grad and t.grad is not None:
                grads[t] = t.grad
    return grads


# ---------------------------------------------------------------------------
# ops


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w.T + b with the bias broadcast over leading axes of x."""
    if (
        w.ndim != 2
        or b.ndim != 1
        or x.ndim < 1
        or x.shape[-1] != w.shape[1]
        or w.shape[0] != b.shape[0]
    ):
        raise ShapeError(f"affine: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    out = Tensor(x.data @ w.data.T + b.data)

    def rule():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            x.accumulate_grad(g @ w.data)
        g2 = g.reshape(-1, w.shape[0])
        if w.requires_grad:
            w.accumulate_grad(g2.T @ x.data.reshape(-1, w.shape[1]))
        if b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0))

    return record(out, (x, w, b), rule)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over leading axes."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes x{x.shape} b{b.shape}")
    out = Tensor(x.data + b.data)

    def rule():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.reshape(-1, b.shape[0]).sum(axis=0))

    return record(out, (x, b), rule)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))

    def rule():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        x.accumulate_grad(np.where(mask, g, 0.0))

    return record(out, (x,), rule)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with Phi the exact standard normal CDF (erf form)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)

    def rule():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        x.accumulate_grad(g * (cdf + x.data * pdf))

    return record(out, (x,), rule)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the trailing axis, max-subtracted for overflow safety."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def rule():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        dot = (g * s).sum(axis=-1, keepdims=True)
        x.accumulate_grad(s * (g - dot))

    return record(out, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each trailing-axis slice to zero mean / unit variance, then
    apply the learnable per-feature affine. Population variance, default
    eps 1e-5."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: expected gamma/beta of shape ({d},), got {gamma.shape} / {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def rule():
        g = out.grad
        if g is None:
            return
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gg = g * gamma.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gg - m1 - xhat * m2))

    return record(out, (x, gamma, beta), rule)


def _check_labels(labels: np.ndarray, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels: expected shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label index out of range [0, {k})")
    return labels.astype(np.int64)


def cross_entropy(probs: Tensor, labels, reduction: str = "sum") -> Tensor:
    """Negative log likelihood of the given class probabilities.

    Rows must already sum to 1 (checked to 1e-6); probabilities are clamped
    at 1e-12 before the log. reduction is "sum" or "mean" over the batch.
    Prefer cross_entropy_with_logits in training code.
    """
    if probs.ndim != 2:
        raise ShapeError(f"cross_entropy: expected 2D probs, got {probs.shape}")
    n, k = probs.shape
    labels = _check_labels(labels, n, k)
    rowsum = probs.data.sum(axis=1)
    if np.any(np.abs(rowsum - 1.0) > 1e-6):
        raise ValueError("cross_entropy: probability rows must sum to 1 within 1e-6")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    picked = np.clip(probs.data[np.arange(n), labels], PROB_CLAMP, None)
    total = -np.log(picked).sum()
    scl = 1.0 / n if reduction == "mean" else 1.0
    out = Tensor(np.asarray(total * scl))

    def rule():
        g = out.grad
        if g is None or not probs.requires_grad:
            return
        gp = np.zeros_like(probs.data)
        live = probs.data[np.arange(n), labels] >= PROB_CLAMP
        gp[np.arange(n), labels] = np.where(live, -1.0 / picked, 0.0)
        probs.accumulate_grad(gp * (float(g) * scl))

    return record(out, (probs,), rule)


def cross_entropy_with_logits(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy computed from logits via a fused log-softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_with_logits: expected 2D logits, got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    m = logits.data.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits.data - m).sum(axis=1, keepdims=True))
    logp = logits.data - lse
    scl = 1.0 / n if reduction == "mean" else 1.0
    out = Tensor(np.asarray(-logp[np.arange(n), labels].sum() * scl))

    def rule():
        g = out.grad
        if g is None or not logits.requires_grad:
            return
        gp = np.exp(logp)
        gp[np.arange(n), labels] -= 1.0
        logits.accumulate_grad(gp * (float(g) * scl))

    return record(out, (logits,), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def rule():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return record(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def rule():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return record(out, (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)

    def rule():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        x.accumulate_grad(g * c)

    return record(out, (x,), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def rule():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return record(out, (a, b), rule)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a 2D tensor, got {x.shape}")
    out = Tensor(x.data.T.copy())

    def rule():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        x.accumulate_grad(g.T)

    return record(out, (x,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = Tensor(x.data.reshape(shape))

    def rule():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        x.accumulate_grad(g.reshape(x.shape))

    return record(out, (x,), rule)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    sizes = [p.shape[axis] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))

    def rule():
        g = out.grad
        if g is None:
            return
        offset = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + s)
                p.accumulate_grad(g[tuple(idx)])
            offset += s

    return record(out, tuple(parts), rule)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along an axis into chunks of the given sizes (inverse of concat)."""
    sizes = [int(s) for s in sizes]
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not cover axis {axis} of {x.shape}")
    outs = []
    offset = 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(offset, offset + s)
        outs.append(Tensor(x.data[tuple(idx)].copy()))
        offset += s

    def rule():
        if not x.requires_grad:
            return
        pieces = []
        for o in outs:
            if o.grad is None:
                pieces.append(np.zeros_like(o.data))
            else:
                pieces.append(o.grad)
        x.accumulate_grad(np.concatenate(pieces, axis=axis))

    if x.requires_grad:
        for o in outs:
            o.requires_grad = True
        if _TAPE_STACK:
            _TAPE_STACK[-1]._entries.append((rule, (x,)))
    return outs


def mean(x: Tensor) -> Tensor:
    """Mean over all elements, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.mean()))

    def rule():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        x.accumulate_grad(np.full(x.shape, float(g) / x.size))

    return record(out, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    """Sum over all elements, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum()))

    def rule():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        x.accumulate_grad(np.full(x.shape, float(g)))

    return record(out, (x,), rule)


# ---------------------------------------------------------------------------
# verification


@dataclass
class GradCheckReport:
    """Elementwise comparison of an autodiff gradient against central
    finite differences."""

    max_abs_err: float
    max_rel_err: float
    autodiff: np.ndarray
    numeric: np.ndarray

    def ok(self, rel_tol: float = 1e-6) -> bool:
        return self.max_rel_err < rel_tol


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    p: Tensor,
    h: float = 1e-5,
    rel_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare d f(p) / dp from the tape against central finite differences.

    ``f`` must be a deterministic scalar-valued function of ``p``. Relative
    errors use ``max(|numeric|, rel_floor)`` as the denominator so that
    near-zero entries are compared absolutely.
    """
    if h <= 0.0:
        raise ValueError("finite_diff_check: step h must be positive")
    p.requires_grad = True
    p.zero_grad()
    with Tape() as tape:
        loss = f(p)
    backward(loss, tape)
    if p.grad is None:
        ad = np.zeros_like(p.data)
    else:
        ad = p.grad.copy()
    p.zero_grad()

    flat = p.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(p).data)
        flat[i] = orig - h
        down = float(f(p).data)
        flat[i] = orig
        numeric[i] = (up - down) / (2.0 * h)
    numeric = numeric.reshape(p.shape)

    abs_err = np.abs(ad - numeric)
    rel_err = abs_err / np.maximum(np.abs(numeric), rel_floor)
    return GradCheckReport(
        max_abs_err=float(abs_err.max()) if abs_err.size else 0.0,
        max_rel_err=float(rel_err.max()) if rel_err.size else 0.0,
        autodiff=ad,
        numeric=numeric,
    )
