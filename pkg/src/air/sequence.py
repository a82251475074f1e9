"""Prefix/prediction sequence assembly, masks, and the prediction-area loss.

A training item pairs a target token grid X (T frames, n codebooks) with a
condition grid C of the same shape.  The model input is the concatenation
[X^p; X] where the prefix X^p copies X except at masked frames, which are
replaced by the condition.  The loss reads only the logits that predict
prediction-area frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def check_tokens(tokens: np.ndarray, vocab: int | None = None) -> np.ndarray:
    """Validate a (T, n) integer token grid and return it as int64."""
    arr = np.asarray(tokens)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"token grid must be (T, n) with T >= 1, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError("token ids must be integers")
    arr = arr.astype(np.int64)
    if arr.min() < 0:
        raise ValueError("negative token id")
    if vocab is not None and arr.max() >= vocab:
        raise ValueError(f"token id out of range for vocab {vocab}")
    return arr


def check_mask(mask: np.ndarray, T: int | None = None) -> np.ndarray:
    """Validate a per-frame 0/1 mask and return it as uint8."""
    m = np.asarray(mask)
    if m.ndim != 1:
        raise ValueError("mask must be 1-D")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask entries must be 0 or 1")
    if T is not None and m.shape[0] != T:
        raise ValueError(f"mask length {m.shape[0]} != sequence length {T}")
    return m.astype(np.uint8)


@dataclass(frozen=True)
class Assembled:
    """[X^p; X] plus the mask that produced the prefix."""

    tokens: np.ndarray  # (2T, n)
    mask: np.ndarray  # (T,)
    T: int


def build_prefix(x: np.ndarray, c: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-frame select: condition where masked, target elsewhere."""
    x = check_tokens(x)
    c = check_tokens(c)
    if x.shape != c.shape:
        raise ValueError(f"target {x.shape} and condition {c.shape} differ")
    m = check_mask(mask, x.shape[0])
    return np.where(m[:, None].astype(bool), c, x)


def assemble(xp: np.ndarray, x: np.ndarray, mask: np.ndarray) -> Assembled:
    """Concatenate prefix and prediction areas into one 2T-frame grid."""
    xp = check_tokens(xp)
    x = check_tokens(x)
    if xp.shape != x.shape:
        raise ValueError(f"prefix {xp.shape} and target {x.shape} differ")
    m = check_mask(mask, x.shape[0])
    return Assembled(np.concatenate([xp, x], axis=0), m, x.shape[0])


def median_smooth(mask: np.ndarray, window: int = 11) -> np.ndarray:
    """Majority filter with replicate edge padding.

    For binary input the windowed median equals the majority vote, i.e.
    more than window//2 ones in the window centered at each frame.
    """
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be odd and positive")
    m = check_mask(mask)
    half = window // 2
    padded = np.pad(m.astype(np.int64), half, mode="edge")
    sums = np.convolve(padded, np.ones(window, dtype=np.int64), mode="valid")
    return (sums > half).astype(np.uint8)


def sample_mask(T: int, lo: float = 0.4, hi: float = 0.8,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Training mask: Bernoulli(rho) per frame with rho ~ U[lo, hi], smoothed."""
    if not (0.0 <= lo <= hi <= 1.0):
        raise ValueError("need 0 <= lo <= hi <= 1")
    if rng is None:
        rng = np.random.default_rng()
    rho = rng.uniform(lo, hi)
    raw = (rng.random(T) < rho).astype(np.uint8)
    return median_smooth(raw, 11)


_PATTERN_RUNS = {1: 1, 2: 2, 3: 4}


def eval_mask(pattern: int, T: int,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Evaluation mask: masked total is exactly T/2 in equal contiguous runs.

    Pattern 1, 2, 3 uses 1, 2, 4 runs.  Placement is uniform over all
    layouts with at least one unmasked frame between consecutive runs.
    """
    if pattern not in _PATTERN_RUNS:
        raise ValueError(f"pattern must be 1, 2 or 3, got {pattern}")
    if T % 8 != 0:
        raise ValueError("T must be divisible by 8")
    if rng is None:
        rng = np.random.default_rng()
    runs = _PATTERN_RUNS[pattern]
    run_len = (T // 2) // runs
    free = T - runs * run_len - (runs - 1)
    if free < 0:
        raise ValueError("sequence too short to place runs with gaps")
    # stars and bars: r slots among free+r reduced positions, expanded back
    slots = np.sort(rng.choice(free + runs, size=runs, replace=False))
    starts = slots + np.arange(runs) * run_len
    mask = np.zeros(T, dtype=np.uint8)
    for s in starts:
        mask[s:s + run_len] = 1
    return mask


def prediction_loss(logits, x: np.ndarray, tape: ad.Tape | None = None) -> ad.Tensor:
    """Mean cross-entropy over prediction-area frames and codebooks.

    `logits` is either a list of n Tensors of shape (2T, V), one per
    codebook head, or a (2T, n, V) array.  The logit row at position
    T-1+t predicts frame t of X, so rows T-1 .. 2T-2 are read and prefix
    rows before that (and the final row) never contribute.
    """
    x = check_tokens(x)
    T, n = x.shape
    if isinstance(logits, np.ndarray):
        if logits.ndim != 3 or logits.shape[1] != n:
            raise ValueError(f"expected (2T, n, V) logits, got {logits.shape}")
        logits = [ad.Tensor(np.ascontiguousarray(logits[:, j, :])) for j in range(n)]
    if len(logits) != n:
        raise ValueError(f"{len(logits)} logit heads for {n} codebooks")
    losses = []
    for j, head in enumerate(logits):
        if head.shape[0] != 2 * T:
            raise ValueError(f"logit head rows {head.shape[0]} != 2T = {2 * T}")
        rows = ad.row_slice(head, T - 1, 2 * T - 1, tape)
        losses.append(ad.cross_entropy(rows, x[:, j], tape))
    if n == 1:
        return losses[0]
    return ad.mean_scalars(losses, tape)
