"""Toy causal transformer decoder over multi-codebook token frames.

Pre-layer-norm residual blocks, biasless d x d attention projections, an
exact-GELU feed-forward, fixed sinusoidal positions, summed per-codebook
embeddings in and one output head per codebook out.  `forward` runs on the
autodiff tape for training; `InferenceSession` is a plain-numpy KV-cache
path for O(S) incremental decoding.

The attention hook seam (`attn_hook`) lets an adapter adjust the attention
block output before the residual add without this module knowing anything
about adapters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import autodiff as ad
from . import rngstreams


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int = 4
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 64
    num_codebooks: int = 1
    max_seq_len: int = 256

    def __post_init__(self):
        if min(self.num_layers, self.model_dim, self.num_heads,
               self.ffn_dim, self.vocab_size, self.num_codebooks) < 1:
            raise ValueError("all decoder dimensions must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def sinusoidal_table(max_len: int, dim: int) -> np.ndarray:
    """Fixed positional encodings; never trained, never checkpointed."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    i = np.arange(half, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((max_len, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim // 2])
    return table


def param_count(config: DecoderConfig) -> int:
    """Closed-form stored-weight count (positional table excluded)."""
    L, d, f = config.num_layers, config.model_dim, config.ffn_dim
    n, V = config.num_codebooks, config.vocab_size
    per_layer = 2 * d + 4 * d * d + 2 * d + d * f + f + f * d + d
    return n * V * d + L * per_layer + 2 * d + n * d * V


class Decoder:
    """Config + weights bundle; forward is a pure function of both."""

    def __init__(self, config: DecoderConfig, params: dict[str, ad.Tensor],
                 dtype=np.float32):
        self.config = config
        self.params = params
        self.pos = sinusoidal_table(config.max_seq_len, config.model_dim).astype(dtype)
        self.dtype = dtype

    @classmethod
    def from_seed(cls, config: DecoderConfig, seed: int, dtype=np.float32):
        rng = rngstreams.stream(seed, rngstreams.INIT)
        c = config
        d, f = c.model_dim, c.ffn_dim

        def w(shape, scale=0.02):
            return ad.Tensor(rng.normal(0.0, scale, size=shape).astype(dtype),
                             requires_grad=True)

        def const(shape, value):
            return ad.Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)

        params: dict[str, ad.Tensor] = {}
        for j in range(c.num_codebooks):
            params[f"emb.{j}"] = w((c.vocab_size, d))
            params[f"head.{j}"] = w((d, c.vocab_size))
        for li in range(c.num_layers):
            p = f"layer.{li}."
            params[p + "ln1.gamma"] = const((d,), 1.0)
            params[p + "ln1.beta"] = const((d,), 0.0)
            for nm in ("wq", "wk", "wv", "wo"):
                params[p + nm] = w((d, d), scale=1.0 / math.sqrt(d))
            params[p + "ln2.gamma"] = const((d,), 1.0)
            params[p + "ln2.beta"] = const((d,), 0.0)
            params[p + "ffn.w1"] = w((d, f), scale=1.0 / math.sqrt(d))
            params[p + "ffn.b1"] = const((f,), 0.0)
            params[p + "ffn.w2"] = w((f, d), scale=1.0 / math.sqrt(f))
            params[p + "ffn.b2"] = const((d,), 0.0)
        params["final.gamma"] = const((d,), 1.0)
        params["final.beta"] = const((d,), 0.0)
        return cls(config, params, dtype)

    # -- introspection -----------------------------------------------------

    def named_parameters(self) -> dict[str, ad.Tensor]:
        return dict(self.params)

    def param_count(self) -> int:
        return sum(int(np.prod(t.shape)) if t.shape else 1
                   for t in self.params.values())

    def astype(self, dtype) -> "Decoder":
        params = {k: ad.Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        return Decoder(self.config, params, dtype)

    # -- tape forward -------------------------------------------------------

    def embed(self, tokens: np.ndarray, tape: ad.Tape | None = None) -> ad.Tensor:
        tokens = np.asarray(tokens)
        S = tokens.shape[0]
        tables = [self.params[f"emb.{j}"] for j in range(self.config.num_codebooks)]
        h = ad.embed_sum(tables, tokens, tape)
        return ad.add_const(h, self.pos[:S], tape)

    def _attend(self, li: int, x: ad.Tensor, tape: ad.Tape | None):
        """Multi-head causal self-attention on normalized input x.

        Returns (s, q): block output after W_o, and the full query matrix
        (handed to the adapter hook so it can reuse the frozen W_q).
        """
        c = self.config
        S = x.shape[0]
        p = f"layer.{li}."
        q = ad.matmul(x, self.params[p + "wq"], tape)
        k = ad.matmul(x, self.params[p + "wk"], tape)
        v = ad.matmul(x, self.params[p + "wv"], tape)
        neg = np.triu(np.full((S, S), -np.inf, dtype=x.dtype), k=1)
        heads = []
        dh = c.head_dim
        for i in range(c.num_heads):
            qi = ad.col_slice(q, i * dh, (i + 1) * dh, tape)
            ki = ad.col_slice(k, i * dh, (i + 1) * dh, tape)
            vi = ad.col_slice(v, i * dh, (i + 1) * dh, tape)
            logits = ad.scale(ad.matmul(qi, ad.transpose(ki, tape), tape),
                              1.0 / math.sqrt(dh), tape)
            att = ad.softmax(ad.add_const(logits, neg, tape), tape)
            heads.append(ad.matmul(att, vi, tape))
        mix = ad.concat_cols(heads, tape) if len(heads) > 1 else heads[0]
        s = ad.matmul(mix, self.params[p + "wo"], tape)
        return s, q

    def forward(self, tokens: np.ndarray, tape: ad.Tape | None = None,
                attn_hook=None) -> list[ad.Tensor]:
        """Token grid (S, n) -> list of n logit Tensors, each (S, V)."""
        tokens = np.asarray(tokens)
        c = self.config
        if tokens.ndim != 2 or tokens.shape[1] != c.num_codebooks:
            raise ValueError(f"tokens must be (S, {c.num_codebooks})")
        if tokens.shape[0] > c.max_seq_len:
            raise ValueError(f"sequence length {tokens.shape[0]} exceeds "
                             f"max_seq_len {c.max_seq_len}")
        h = self.embed(tokens, tape)
        for li in range(c.num_layers):
            p = f"layer.{li}."
            x = ad.layer_norm(h, self.params[p + "ln1.gamma"],
                              self.params[p + "ln1.beta"], 1e-5, tape)
            s, q = self._attend(li, x, tape)
            if attn_hook is not None:
                s = attn_hook(li, x, q, s, tape)
            h = ad.add(h, s, tape)
            x2 = ad.layer_norm(h, self.params[p + "ln2.gamma"],
                               self.params[p + "ln2.beta"], 1e-5, tape)
            f1 = ad.add_bias(ad.matmul(x2, self.params[p + "ffn.w1"], tape),
                             self.params[p + "ffn.b1"], tape)
            f2 = ad.add_bias(ad.matmul(ad.gelu(f1, tape),
                                       self.params[p + "ffn.w2"], tape),
                             self.params[p + "ffn.b2"], tape)
            h = ad.add(h, f2, tape)
        h = ad.layer_norm(h, self.params["final.gamma"], self.params["final.beta"],
                          1e-5, tape)
        return [ad.matmul(h, self.params[f"head.{j}"], tape)
                for j in range(c.num_codebooks)]

    def logits_array(self, tokens: np.ndarray) -> np.ndarray:
        """Tape-free forward returning an (S, n, V) array."""
        outs = self.forward(tokens)
        return np.stack([o.data for o in outs], axis=1)


# ---------------------------------------------------------------------------
# incremental inference
# ---------------------------------------------------------------------------


def _np_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def _np_gelu(x):
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def _np_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class InferenceSession:
    """Plain-numpy incremental forward with per-layer key/value caches.

    `row_hook(li, x_row, q_row, s_row, pos) -> s_row` mirrors the tape
    `attn_hook` for a single position; the adapter's cross-attention only
    needs the current query, so caching stays valid.
    """

    def __init__(self, decoder: Decoder, row_hook=None):
        self.dec = decoder
        self.hook = row_hook
        c = decoder.config
        self.pos = 0
        self._k = [np.zeros((c.max_seq_len, c.model_dim), dtype=decoder.dtype)
                   for _ in range(c.num_layers)]
        self._v = [np.zeros((c.max_seq_len, c.model_dim), dtype=decoder.dtype)
                   for _ in range(c.num_layers)]

    def append(self, frame: np.ndarray) -> np.ndarray:
        """Feed one (n,) token frame; return this position's (n, V) logits."""
        dec, c = self.dec, self.dec.config
        if self.pos >= c.max_seq_len:
            raise ValueError("sequence length exceeds max_seq_len")
        frame = np.asarray(frame).reshape(c.num_codebooks)
        P = dec.params
        h = sum(P[f"emb.{j}"].data[frame[j]] for j in range(c.num_codebooks))
        h = h + dec.pos[self.pos]
        dh = c.head_dim
        for li in range(c.num_layers):
            p = f"layer.{li}."
            x = _np_layer_norm(h, P[p + "ln1.gamma"].data, P[p + "ln1.beta"].data)
            q = x @ P[p + "wq"].data
            self._k[li][self.pos] = x @ P[p + "wk"].data
            self._v[li][self.pos] = x @ P[p + "wv"].data
            k = self._k[li][: self.pos + 1]
            v = self._v[li][: self.pos + 1]
            mix = np.empty(c.model_dim, dtype=h.dtype)
            for i in range(c.num_heads):
                sl = slice(i * dh, (i + 1) * dh)
                att = _np_softmax(q[sl] @ k[:, sl].T / math.sqrt(dh))
                mix[sl] = att @ v[:, sl]
            s = mix @ P[p + "wo"].data
            if self.hook is not None:
                s = self.hook(li, x, q, s, self.pos)
            h = h + s
            x2 = _np_layer_norm(h, P[p + "ln2.gamma"].data, P[p + "ln2.beta"].data)
            f = _np_gelu(x2 @ P[p + "ffn.w1"].data + P[p + "ffn.b1"].data)
            h = h + f @ P[p + "ffn.w2"].data + P[p + "ffn.b2"].data
        h = _np_layer_norm(h, P["final.gamma"].data, P["final.beta"].data)
        self.pos += 1
        return np.stack([h @ P[f"head.{j}"].data for j in range(c.num_codebooks)])


def select_tokens(logits: np.ndarray, mode: str = "greedy", k: int = 1,
                  temperature: float = 1.0,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Pick one token per codebook head from (n, V) logits."""
    if mode == "greedy":
        return logits.argmax(axis=1)
    if mode != "topk":
        raise ValueError(f"unknown decode mode {mode!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return logits.argmax(axis=1)
    if rng is None:
        raise ValueError("top-k sampling needs an rng")
    out = np.empty(logits.shape[0], dtype=np.int64)
    for j, row in enumerate(logits):
        top = np.argsort(row)[::-1][:k]
        p = _np_softmax(row[top].astype(np.float64) / temperature)
        out[j] = rng.choice(top, p=p)
    return out


def decode_prediction_area(decoder: Decoder, prefix: np.ndarray,
                           mode: str = "greedy", k: int = 1,
                           temperature: float = 1.0,
                           rng: np.random.Generator | None = None,
                           row_hook=None) -> np.ndarray:
    """Autoregressively emit the T prediction frames after a T-frame prefix.

    The logits at the last prefix position choose the first prediction
    frame; every chosen frame is fed back before the next step.  The final
    frame is chosen but never fed.
    """
    prefix = np.asarray(prefix)
    T = prefix.shape[0]
    sess = InferenceSession(decoder, row_hook)
    logits = None
    for t in range(T):
        logits = sess.append(prefix[t])
    preds = np.empty((T, decoder.config.num_codebooks), dtype=np.int64)
    for t in range(T):
        preds[t] = select_tokens(logits, mode, k, temperature, rng)
        if t < T - 1:
            logits = sess.append(preds[t])
    return preds


def decode_continuation(decoder: Decoder, context: np.ndarray, total: int,
                        mode: str = "greedy", k: int = 1,
                        temperature: float = 1.0,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Plain next-token continuation of `context` out to `total` frames."""
    context = np.asarray(context)
    t0 = context.shape[0]
    if not 1 <= t0 <= total:
        raise ValueError("context must be non-empty and no longer than total")
    sess = InferenceSession(decoder)
    logits = None
    for t in range(t0):
        logits = sess.append(context[t])
    out = np.empty((total, decoder.config.num_codebooks), dtype=np.int64)
    out[:t0] = context
    for t in range(t0, total):
        out[t] = select_tokens(logits, mode, k, temperature, rng)
        if t < total - 1:
            logits = sess.append(out[t])
    return out
