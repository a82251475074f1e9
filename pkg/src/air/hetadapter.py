"""Routed, gated adapter banks over a frozen decoder.

Each layer carries four banks of m free d-vectors, one per position type:
1 prefix/unmasked, 2 prefix/masked, 3 prediction/unmasked, 4
prediction/masked.  A position's query cross-attends over its bank using
the layer's own (frozen) projection matrices, and the result enters the
residual stream through a per-(layer, type) scalar gate that starts at
exactly zero, so an untrained adapted model is the base model.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import rngstreams

TYPES = (1, 2, 3, 4)


def route(t: int, T: int, mask: np.ndarray) -> int:
    """Adapter type for 1-based position t of the assembled sequence."""
    mask = np.asarray(mask)
    if mask.shape != (T,):
        raise ValueError(f"mask length {mask.shape} != prefix length {T}")
    if not 1 <= t <= 2 * T:
        raise ValueError(f"position {t} outside 1..{2 * T}")
    if t <= T:
        return 2 if mask[t - 1] else 1
    return 4 if mask[t - T - 1] else 3


def route_table(T: int, mask: np.ndarray) -> np.ndarray:
    """Types for all 2T positions at once (0-based indexing)."""
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (T,):
        raise ValueError(f"mask length {mask.shape} != prefix length {T}")
    out = np.empty(2 * T, dtype=np.int64)
    out[:T] = np.where(mask, 2, 1)
    out[T:] = np.where(mask, 4, 3)
    return out


def adapter_param_count(L: int, m: int, d: int) -> int:
    """4 banks of m x d per layer plus 4 scalar gates per layer."""
    if min(L, m, d) < 1:
        raise ValueError("L, m, d must all be >= 1")
    return 4 * L * m * d + 4 * L


def apply_gate(s: np.ndarray, u: np.ndarray, g: float) -> np.ndarray:
    if np.shape(s) != np.shape(u):
        raise ValueError("gate operands must share a shape")
    return s + g * u


def adapter_cross_attention(h: np.ndarray, bank: np.ndarray, wq: np.ndarray,
                            wk: np.ndarray, wv: np.ndarray, wo: np.ndarray,
                            num_heads: int) -> np.ndarray:
    """Numpy cross-attention of query W_q.h over bank rows, matrices reused.

    `h` is one d-vector or a row matrix of them; the bank never sees
    positional encoding and its rows do not attend to each other.
    """
    hh = np.atleast_2d(h)
    q = hh @ wq
    k = bank @ wk
    v = bank @ wv
    d = wq.shape[0]
    dh = d // num_heads
    u = np.empty_like(q)
    for i in range(num_heads):
        sl = slice(i * dh, (i + 1) * dh)
        att = dec._np_softmax(q[:, sl] @ k[:, sl].T / math.sqrt(dh))
        u[:, sl] = att @ v[:, sl]
    u = u @ wo
    return u if np.ndim(h) == 2 else u[0]


class AdaptedModel:
    """Frozen base decoder plus trainable banks and gates."""

    def __init__(self, base: dec.Decoder, banks: dict[str, ad.Tensor],
                 gates: dict[str, ad.Tensor], width: int):
        self.base = base
        self.banks = banks
        self.gates = gates
        self.width = width

    @classmethod
    def attach(cls, base: dec.Decoder, width: int, seed: int = 0):
        if width < 1:
            raise ValueError("adapter width must be >= 1")
        rng = rngstreams.stream(seed, rngstreams.INIT, 1)
        d = base.config.model_dim
        banks, gates = {}, {}
        for li in range(base.config.num_layers):
            for r in TYPES:
                banks[f"adapter.layer{li}.type{r}"] = ad.Tensor(
                    rng.normal(0.0, 0.02, size=(width, d)).astype(base.dtype),
                    requires_grad=True)
                gates[f"gate.layer{li}.type{r}"] = ad.Tensor(
                    np.zeros((), dtype=base.dtype), requires_grad=True)
        for p in base.params.values():
            p.requires_grad = False
        return cls(base, banks, gates, width)

    # -- introspection -------------------------------------------------------

    def named_trainables(self) -> dict[str, ad.Tensor]:
        out = dict(self.banks)
        out.update(self.gates)
        return out

    def trainables(self) -> list[ad.Tensor]:
        return list(self.named_trainables().values())

    def trainable_count(self) -> int:
        return sum(int(np.prod(t.shape)) if t.shape else 1
                   for t in self.trainables())

    def gate_values(self) -> dict[str, float]:
        return {k: float(v.data) for k, v in self.gates.items()}

    # -- forward -------------------------------------------------------------

    def _pair(self, li: int, r: int) -> tuple[ad.Tensor, ad.Tensor]:
        return (self.banks[f"adapter.layer{li}.type{r}"],
                self.gates[f"gate.layer{li}.type{r}"])

    def forward(self, tokens: np.ndarray, mask: np.ndarray,
                tape: ad.Tape | None = None) -> list[ad.Tensor]:
        """Adapted forward over S <= 2T frames of the assembled grid.

        Routing comes from (mask length T, position), so a partially
        generated sequence routes identically to the full one.
        """
        tokens = np.asarray(tokens)
        S = tokens.shape[0]
        T = np.asarray(mask).shape[0]
        if S > 2 * T:
            raise ValueError(f"sequence length {S} exceeds 2T = {2 * T}")
        types = route_table(T, mask)[:S]
        c = self.base.config
        d, dh = c.model_dim, c.head_dim
        selectors = {r: (types == r).astype(self.base.dtype)[:, None]
                     * np.ones((1, d), dtype=self.base.dtype)
                     for r in TYPES if (types == r).any()}

        def hook(li, x, q, s, hook_tape):
            P = self.base.params
            wk, wv = P[f"layer.{li}.wk"], P[f"layer.{li}.wv"]
            wo = P[f"layer.{li}.wo"]
            for r, sel in selectors.items():
                bank, gate = self._pair(li, r)
                k = ad.matmul(bank, wk, hook_tape)
                v = ad.matmul(bank, wv, hook_tape)
                heads = []
                for i in range(c.num_heads):
                    qi = ad.col_slice(q, i * dh, (i + 1) * dh, hook_tape)
                    ki = ad.col_slice(k, i * dh, (i + 1) * dh, hook_tape)
                    vi = ad.col_slice(v, i * dh, (i + 1) * dh, hook_tape)
                    att = ad.softmax(ad.scale(
                        ad.matmul(qi, ad.transpose(ki, hook_tape), hook_tape),
                        1.0 / math.sqrt(dh), hook_tape), hook_tape)
                    heads.append(ad.matmul(att, vi, hook_tape))
                mix = (ad.concat_cols(heads, hook_tape)
                       if len(heads) > 1 else heads[0])
                u = ad.matmul(mix, wo, hook_tape)
                gated = ad.gate_scale(u, gate, hook_tape)
                s = ad.add(s, ad.mul_const(gated, sel, hook_tape), hook_tape)
            return s

        return self.base.forward(tokens, tape, attn_hook=hook)

    def logits_array(self, tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
        outs = self.forward(tokens, mask)
        return np.stack([o.data for o in outs], axis=1)

    # -- inference -----------------------------------------------------------

    def row_hook(self, mask: np.ndarray):
        """Per-position hook for decoder.InferenceSession.

        Bank keys/values are precomputed once; only the routed type's
        cross-attention runs per position.
        """
        mask = np.asarray(mask)
        T = mask.shape[0]
        types = route_table(T, mask)
        c = self.base.config
        dh = c.head_dim
        P = self.base.params
        kv = {}
        for li in range(c.num_layers):
            for r in TYPES:
                bank = self.banks[f"adapter.layer{li}.type{r}"].data
                kv[li, r] = (bank @ P[f"layer.{li}.wk"].data,
                             bank @ P[f"layer.{li}.wv"].data)

        def hook(li, x, q, s, pos):
            r = types[pos]
            g = float(self.gates[f"gate.layer{li}.type{r}"].data)
            if g == 0.0:
                return s
            k, v = kv[li, r]
            u = np.empty_like(q)
            for i in range(c.num_heads):
                sl = slice(i * dh, (i + 1) * dh)
                att = dec._np_softmax(q[sl] @ k[:, sl].T / math.sqrt(dh))
                u[sl] = att @ v[:, sl]
            return s + g * (u @ P[f"layer.{li}.wo"].data)

        return hook

    def decode_prediction_area(self, prefix: np.ndarray, mask: np.ndarray,
                               mode: str = "greedy", k: int = 1,
                               temperature: float = 1.0,
                               rng: np.random.Generator | None = None):
        return dec.decode_prediction_area(self.base, prefix, mode, k,
                                          temperature, rng,
                                          row_hook=self.row_hook(mask))
