"""Synthetic condition-to-target tasks with an exact inpainting oracle.

Three task kinds, graded by what the model must use:

  copy        x_t = c_t; pure condition following
  affine      x_t = (alpha*c_t + beta*x_{t-1} + gamma) mod V with a virtual
              x_0 = 0 anchor; needs both the condition and the running
              autoregressive state
  chordcycle  C is piecewise-constant; each condition token c selects the
              ordered set of target tokens congruent to c mod 24, and
              x_t cycles through it by frame index, so (c_t, t) fully
              determines x_t

Every token v < V carries fixed music-like semantics: pitch class v % 12,
quality major/minor by (v // 12) % 2.  Tokens sharing a chordcycle pattern
are congruent mod 24, hence share pitch class and quality, which is what
makes the chroma and chord-recall metrics meaningful on this task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataio
from . import rngstreams

KINDS = ("copy", "affine", "chordcycle")
CYCLE_MOD = 24


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "affine"
    vocab: int = 64
    alpha: int = 1
    beta: int = 1
    gamma: int = 0
    seg_lo: int = 8
    seg_hi: int = 24
    p_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if not 0.0 <= self.p_noise < 1.0:
            raise ValueError("p_noise must be in [0, 1)")
        if not 1 <= self.seg_lo <= self.seg_hi:
            raise ValueError("need 1 <= seg_lo <= seg_hi")


def token_pitch_class(v: int) -> int:
    return v % 12


def token_quality(v: int) -> str:
    return "maj" if (v // 12) % 2 == 0 else "min"


def cycle_pattern(spec: TaskSpec, c: int) -> list[int]:
    """Target tokens congruent to c modulo 24, ascending."""
    return list(range(c % CYCLE_MOD, spec.vocab, CYCLE_MOD))


def _condition(spec: TaskSpec, T: int, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "chordcycle":
        c = np.empty(T, dtype=np.int64)
        hi = min(CYCLE_MOD, spec.vocab)
        t = 0
        prev = -1
        while t < T:
            seg = int(rng.integers(spec.seg_lo, spec.seg_hi + 1))
            if prev < 0:
                tok = int(rng.integers(0, hi))
            else:
                # draw from the other hi-1 tokens so segments never merge
                tok = int(rng.integers(0, hi - 1))
                if tok >= prev:
                    tok += 1
            c[t:t + seg] = tok
            prev = tok
            t += seg
        return c
    return rng.integers(0, spec.vocab, size=T)


def _target(spec: TaskSpec, c: np.ndarray) -> np.ndarray:
    T = c.shape[0]
    x = np.empty(T, dtype=np.int64)
    if spec.kind == "copy":
        x[:] = c
    elif spec.kind == "affine":
        prev = 0
        for t in range(T):
            prev = (spec.alpha * int(c[t]) + spec.beta * prev + spec.gamma) % spec.vocab
            x[t] = prev
    else:
        for t in range(T):
            pat = cycle_pattern(spec, int(c[t]))
            x[t] = pat[t % len(pat)]
    return x


def gen_pair(spec: TaskSpec, T: int,
             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (X, C) pair of (T, 1) token grids."""
    if T < 1:
        raise ValueError("T must be >= 1")
    c = _condition(spec, T, rng)
    x = _target(spec, c)
    if spec.p_noise > 0.0:
        hit = rng.random(T) < spec.p_noise
        x[hit] = rng.integers(0, spec.vocab, size=int(hit.sum()))
    return x[:, None], c[:, None]


def oracle_inpaint(spec: TaskSpec, c: np.ndarray, mask: np.ndarray,
                   x: np.ndarray) -> np.ndarray:
    """Exact masked-frame reconstruction by replaying the generative rule.

    Only unmasked entries of `x` are consulted.  The affine recursion
    restarts from the nearest unmasked frame before each masked run (or
    the virtual anchor 0 at the sequence start).
    """
    if spec.p_noise != 0.0:
        raise ValueError("oracle is only defined for deterministic specs")
    c = np.asarray(c).reshape(-1)
    x = np.asarray(x).reshape(-1)
    mask = np.asarray(mask).astype(bool)
    T = c.shape[0]
    if mask.shape != (T,) or x.shape != (T,):
        raise ValueError("condition, target and mask lengths differ")
    out = []
    if spec.kind == "copy":
        out = [int(c[t]) for t in range(T) if mask[t]]
    elif spec.kind == "chordcycle":
        for t in range(T):
            if mask[t]:
                pat = cycle_pattern(spec, int(c[t]))
                out.append(pat[t % len(pat)])
    else:
        prev = 0
        for t in range(T):
            if mask[t]:
                prev = (spec.alpha * int(c[t]) + spec.beta * prev
                        + spec.gamma) % spec.vocab
                out.append(prev)
            else:
                prev = int(x[t])
    return np.asarray(out, dtype=np.int64)[:, None]


def record_rng(spec: TaskSpec, index: int) -> np.random.Generator:
    """Counter-based stream: record i is reproducible in isolation."""
    return rngstreams.stream(spec.seed, rngstreams.DATA, index)


def gen_records(spec: TaskSpec, n_records: int,
                T: int) -> tuple[np.ndarray, np.ndarray]:
    xs = np.empty((n_records, T, 1), dtype=np.int64)
    cs = np.empty((n_records, T, 1), dtype=np.int64)
    for i in range(n_records):
        xs[i], cs[i] = gen_pair(spec, T, record_rng(spec, i))
    return xs, cs


def gen_dataset(spec: TaskSpec, n_records: int, T: int, path) -> None:
    xs, cs = gen_records(spec, n_records, T)
    dataio.write_dataset(path, xs, cs, spec.vocab)
