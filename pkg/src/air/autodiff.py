"""Dense-array reverse-mode autodiff on an explicit tape.

Just enough machinery for a small transformer decoder: 2-D matrices,
scalar losses, and the handful of ops the model needs. Every op takes an
optional ``tape``; with ``tape=None`` only the forward value is computed,
which is what the finite-difference checker and inference paths use.
Gradient accumulation follows tape order exactly, so repeated backward
passes over the same graph are bitwise identical.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf


class Tensor:
    """An ndarray with an optional gradient slot.

    ``data`` is kept C-contiguous, so it is a flat row-major buffer plus a
    shape. ``grad``, when present, has the same shape and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed ops.

    Records are appended as ops run, so the list is always topologically
    ordered: an op appears after every op that produced one of its inputs.
    """

    def __init__(self):
        self.records: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []

    def record(self, name: str, inputs: tuple[Tensor, ...], output: Tensor,
               backward: Callable[[np.ndarray], tuple]) -> None:
        self.records.append((name, inputs, output, backward))

    def __len__(self) -> int:
        return len(self.records)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor] | None = None,
             into: dict[Tensor, np.ndarray] | None = None) -> None:
    """Accumulate d(loss)/d(tensor) for every requires_grad tensor on the tape.

    Gradients are added into ``.grad`` (initialized to zeros when absent), or
    into the ``into`` dict instead when given -- that variant never touches
    shared state, so batch items can run in worker threads and be reduced in
    a fixed order afterwards. ``params``, when given, are guaranteed a grad
    entry even if the loss never touched them.
    """
    if loss.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None and into is None:
        for p in params:
            if p.grad is None:
                p.zero_grad()

    def sink(t: Tensor, g: np.ndarray) -> None:
        if into is not None:
            if t in into:
                into[t] = into[t] + g
            else:
                into[t] = g.copy()
        else:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad = t.grad + g

    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for _name, inputs, output, bwd in reversed(tape.records):
        g_out = flows.pop(id(output), None)
        if g_out is None:
            continue
        if output.requires_grad:
            sink(output, g_out)
        for inp, g in zip(inputs, bwd(g_out)):
            if g is None:
                continue
            key = id(inp)
            if key in flows:
                flows[key] = flows[key] + g
            else:
                flows[key] = g
            by_id[key] = inp
    # whatever is left in `flows` was never produced by a record: leaves
    for key, g in flows.items():
        t = by_id[key]
        if t.requires_grad:
            sink(t, g)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def _emit(tape: Tape | None, name: str, inputs: tuple[Tensor, ...], out: Tensor,
          bwd: Callable[[np.ndarray], tuple]) -> Tensor:
    if tape is not None:
        tape.record(name, inputs, out, bwd)
    return out


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _emit(tape, "matmul", (a, b), out, bwd)


def transpose(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data.T)

    def bwd(g):
        return (g.T,)

    return _emit(tape, "transpose", (a,), out, bwd)


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return g, g

    return _emit(tape, "add", (a, b), out, bwd)


def add_bias(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Add a length-k row vector to every row of an (R, k) matrix."""
    if a.data.ndim != 2 or b.shape != (a.shape[1],):
        raise ValueError(f"add_bias shape mismatch: {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return g, g.sum(axis=0)

    return _emit(tape, "add_bias", (a, b), out, bwd)


def add_const(a: Tensor, c: np.ndarray, tape: Tape | None = None) -> Tensor:
    if np.shape(c) != a.shape:
        raise ValueError(f"add_const shape mismatch: {a.shape} + {np.shape(c)}")
    out = Tensor(a.data + c)

    def bwd(g):
        return (g,)

    return _emit(tape, "add_const", (a,), out, bwd)


def mul_const(a: Tensor, c: np.ndarray, tape: Tape | None = None) -> Tensor:
    if np.shape(c) != a.shape:
        raise ValueError(f"mul_const shape mismatch: {a.shape} * {np.shape(c)}")
    out = Tensor(a.data * c)

    def bwd(g):
        return (g * c,)

    return _emit(tape, "mul_const", (a,), out, bwd)


def scale(a: Tensor, s: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data * s)

    def bwd(g):
        return (g * s,)

    return _emit(tape, "scale", (a,), out, bwd)


def gate_scale(a: Tensor, gate: Tensor, tape: Tape | None = None) -> Tensor:
    """Multiply by a trainable scalar (shape-() tensor)."""
    if gate.shape != ():
        raise ValueError(f"gate must be a scalar tensor, got shape {gate.shape}")
    out = Tensor(a.data * gate.data)

    def bwd(g):
        return g * gate.data, np.asarray((g * a.data).sum(), dtype=a.dtype)

    return _emit(tape, "gate_scale", (a, gate), out, bwd)


def softmax(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Row-wise softmax of a 1-D vector or a 2-D matrix.

    Stabilized by max subtraction. Rows may contain -inf entries (masked
    logits) as long as at least one entry per row is finite.
    """
    x = a.data
    if np.isnan(x).any():
        raise ValueError("softmax input contains NaN")
    rows = x if x.ndim == 2 else x[None, :]
    m = rows.max(axis=1, keepdims=True)
    e = np.exp(rows - m)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p if x.ndim == 2 else p[0])

    def bwd(g):
        gg = g if g.ndim == 2 else g[None, :]
        dx = p * (gg - (gg * p).sum(axis=1, keepdims=True))
        return (dx if x.ndim == 2 else dx[0],)

    return _emit(tape, "softmax", (a,), out, bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               tape: Tape | None = None) -> Tensor:
    """Per-row mean removal and variance normalization, then affine."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = a.data
    rows = x if x.ndim == 2 else x[None, :]
    d = rows.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError("layer_norm gamma/beta must match the feature dimension")
    mu = rows.mean(axis=1, keepdims=True)
    var = rows.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (rows - mu) * inv
    y = xhat * gamma.data + beta.data
    out = Tensor(y if x.ndim == 2 else y[0])

    def bwd(g):
        gg = g if g.ndim == 2 else g[None, :]
        dgamma = (gg * xhat).sum(axis=0)
        dbeta = gg.sum(axis=0)
        dxhat = gg * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return (dx if x.ndim == 2 else dx[0]), dgamma, dbeta

    return _emit(tape, "layer_norm", (a, gamma, beta), out, bwd)


def gelu(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Exact (erf-based) GELU; smooth, so finite differences stay honest."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = Tensor(x * cdf)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _emit(tape, "gelu", (a,), out, bwd)


def embed_sum(tables: Sequence[Tensor], tokens: np.ndarray,
              tape: Tape | None = None) -> Tensor:
    """Sum per-codebook embedding rows: out[s] = sum_c tables[c][tokens[s, c]]."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != len(tables):
        raise ValueError(f"tokens must be (S, {len(tables)}), got {tokens.shape}")
    for tab in tables:
        if (tokens < 0).any() or (tokens >= tab.shape[0]).any():
            raise IndexError("token id out of embedding range")
    acc = tables[0].data[tokens[:, 0]]
    for c in range(1, len(tables)):
        acc = acc + tables[c].data[tokens[:, c]]
    out = Tensor(acc)

    def bwd(g):
        grads = []
        for c, tab in enumerate(tables):
            gt = np.zeros_like(tab.data)
            np.add.at(gt, tokens[:, c], g)
            grads.append(gt)
        return tuple(grads)

    return _emit(tape, "embed_sum", tuple(tables), out, bwd)


def col_slice(a: Tensor, j0: int, j1: int, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data[:, j0:j1].copy())

    def bwd(g):
        z = np.zeros_like(a.data)
        z[:, j0:j1] = g
        return (z,)

    return _emit(tape, "col_slice", (a,), out, bwd)


def row_slice(a: Tensor, i0: int, i1: int, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data[i0:i1].copy())

    def bwd(g):
        z = np.zeros_like(a.data)
        z[i0:i1] = g
        return (z,)

    return _emit(tape, "row_slice", (a,), out, bwd)


def concat_cols(parts: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    widths = [p.shape[1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))

    def bwd(g):
        grads, j = [], 0
        for w in widths:
            grads.append(g[:, j:j + w])
            j += w
        return tuple(grads)

    return _emit(tape, "concat_cols", tuple(parts), out, bwd)


def sum_all(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum every entry of `a` into a scalar () tensor."""
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))

    def bwd(g):
        return (np.full_like(a.data, g),)

    return _emit(tape, "sum_all", (a,), out, bwd)


def mean_scalars(parts: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    for p in parts:
        if p.shape != ():
            raise ValueError("mean_scalars expects scalar tensors")
    k = len(parts)
    out = Tensor(np.asarray(sum(p.data for p in parts) / k, dtype=parts[0].dtype))

    def bwd(g):
        return tuple(np.asarray(g / k, dtype=p.dtype) for p in parts)

    return _emit(tape, "mean_scalars", tuple(parts), out, bwd)


def cross_entropy(logits: Tensor, target, tape: Tape | None = None) -> Tensor:
    """-log softmax(logits)[target], averaged over rows for 2-D input.

    1-D logits take a single integer target; (R, V) logits take R targets.
    """
    x = logits.data
    rows = x if x.ndim == 2 else x[None, :]
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    r, v = rows.shape
    if targets.shape != (r,):
        raise ValueError(f"expected {r} targets, got {targets.shape}")
    if (targets < 0).any() or (targets >= v).any():
        raise IndexError("cross_entropy target out of range")
    m = rows.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=1))
    picked = rows[np.arange(r), targets]
    out = Tensor(np.asarray((lse - picked).mean(), dtype=x.dtype))

    def bwd(g):
        p = np.exp(rows - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(r), targets] -= 1.0
        dx = p * (g / r)
        return (dx if x.ndim == 2 else dx[0],)

    return _emit(tape, "cross_entropy", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# verification and optimization
# ---------------------------------------------------------------------------


def finite_diff_check(loss_fn: Callable[[Tape | None], Tensor],
                      params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn(tape)`` must rebuild the forward pass from the current param
    values; it is invoked with ``tape=None`` for the perturbed evaluations.
    Relative error per entry is |analytic - numeric| / (|analytic| +
    |numeric| + 1e-12). Parameters must be float64: central differences at
    eps ~ 1e-5 are meaningless in single precision.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("finite_diff_check requires float64 parameters")
    tape = Tape()
    loss = loss_fn(tape)
    zero_grads(params)
    backward(loss, tape, params=params)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn(None).data)
            flat[i] = orig - eps
            f_minus = float(loss_fn(None).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(gflat[i] - numeric) / (abs(gflat[i]) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return worst


class Adam:
    """Adam with bias correction; state is positional over the param list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                raise ValueError("param has no gradient; run backward first")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data = p.data - (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup: lr * step / warmup_steps for step < warmup_steps, then flat.

    Steps are 1-indexed, so the first step already makes progress.
    """
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr
