"""Two-phase training: autoregressive pretraining, then adapter-only PEFT.

Pretraining teaches the base decoder plain next-token prediction over
target sequences; it never sees conditions or masks.  PEFT freezes that
decoder, attaches the adapter banks, and trains only adapters and gates on
the prefix/prediction inpainting objective, logging gate magnitudes as it
goes.

Determinism contract: (seed, config, dataset) fix every trained byte.
Batch items draw their masks from per-(epoch, item) counter streams and
their gradients are reduced in batch-index order, so `threads` changes
wall time, never results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dataio
from . import decoder as dec
from . import hetadapter as het
from . import rngstreams
from . import sequence as seq

GATE_LOG_EVERY = 10


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    warmup_frac: float = 0.0
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    phase: str = "peft"
    mask_lo: float = 0.4
    mask_hi: float = 0.8
    threads: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValueError("warmup fraction must lie in [0, 1]")
        if not 0.0 <= self.mask_lo <= self.mask_hi <= 1.0:
            raise ValueError("need 0 <= mask_lo <= mask_hi <= 1")
        if self.phase not in ("pretrain", "peft"):
            raise ValueError("phase must be pretrain or peft")
        if self.batch_size < 1 or self.epochs < 0 or self.threads < 1:
            raise ValueError("batch_size/threads must be >= 1, epochs >= 0")


@dataclass
class GateLog:
    names: list[str]
    steps: list[int] = field(default_factory=list)
    magnitudes: list[list[float]] = field(default_factory=list)

    def log(self, step: int, gates: dict[str, ad.Tensor]) -> None:
        self.steps.append(step)
        self.magnitudes.append([abs(float(gates[n].data)) for n in self.names])

    def final(self) -> dict[str, float]:
        return dict(zip(self.names, self.magnitudes[-1]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write("step," + ",".join(self.names) + "\n")
            for s, row in zip(self.steps, self.magnitudes):
                f.write(str(s) + "," + ",".join(f"{v:.8f}" for v in row) + "\n")


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def _train(n_items: int, item_loss, params: list[ad.Tensor],
           cfg: TrainConfig, on_step=None) -> list[float]:
    """Generic epoch/batch loop: returns the per-step mean losses.

    `item_loss(epoch, idx, tape) -> Tensor` builds one item's scalar loss.
    Gradients are collected per item into private dicts and reduced in
    batch order, so thread count cannot affect the result.
    """
    if n_items == 0:
        raise ValueError("dataset is empty")
    steps_per_epoch = (n_items + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = int(round(cfg.warmup_frac * total_steps))
    opt = ad.Adam(params, lr=cfg.lr)
    history: list[float] = []
    step = 0
    pool = (ThreadPoolExecutor(max_workers=cfg.threads)
            if cfg.threads > 1 else None)
    try:
        for epoch in range(cfg.epochs):
            order = rngstreams.stream(cfg.seed, rngstreams.SHUFFLE,
                                      epoch).permutation(n_items)
            for batch in _batches(order, cfg.batch_size):
                step += 1

                def one(idx: int):
                    tape = ad.Tape()
                    loss = item_loss(epoch, int(idx), tape)
                    grads: dict[ad.Tensor, np.ndarray] = {}
                    ad.backward(loss, tape, into=grads)
                    return float(loss.data), grads

                results = list(pool.map(one, batch)) if pool else [one(i) for i in batch]
                inv = 1.0 / len(batch)
                for p in params:
                    acc = np.zeros_like(p.data)
                    for _, grads in results:
                        g = grads.get(p)
                        if g is not None:
                            acc = acc + g
                    p.grad = acc * inv
                lr = (ad.warmup_lr(cfg.lr, step, warmup_steps)
                      if warmup_steps > 0 else cfg.lr)
                opt.step(lr=lr)
                history.append(sum(r[0] for r in results) * inv)
                if on_step is not None:
                    on_step(step)
    finally:
        if pool:
            pool.shutdown()
    return history


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------


def next_token_loss(model: dec.Decoder, x: np.ndarray,
                    tape: ad.Tape | None = None) -> ad.Tensor:
    """Plain autoregressive loss over one (T, n) target grid."""
    x = np.asarray(x)
    heads = model.forward(x, tape)
    losses = []
    for j, head in enumerate(heads):
        rows = ad.row_slice(head, 0, x.shape[0] - 1, tape)
        losses.append(ad.cross_entropy(rows, x[1:, j], tape))
    return losses[0] if len(losses) == 1 else ad.mean_scalars(losses, tape)


def pretrain_base(cfg: TrainConfig, dataset: dataio.Dataset,
                  decoder_config: dec.DecoderConfig | None = None,
                  on_step=None) -> tuple[dec.Decoder, list[float]]:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if decoder_config is None:
        decoder_config = dec.DecoderConfig(
            vocab_size=dataset.vocab,
            num_codebooks=dataset.x.shape[2],
            max_seq_len=2 * dataset.x.shape[1])
    model = dec.Decoder.from_seed(decoder_config, cfg.seed)
    params = list(model.named_parameters().values())

    def item_loss(epoch, idx, tape):
        return next_token_loss(model, dataset.x[idx], tape)

    history = _train(len(dataset), item_loss, params, cfg, on_step)
    return model, history


def peft_finetune(base: dec.Decoder, width: int, cfg: TrainConfig,
                  dataset: dataio.Dataset, condition_override=None,
                  on_step=None) -> tuple[het.AdaptedModel, GateLog, list[float]]:
    """Adapter-only finetuning on the inpainting objective.

    `condition_override(c) -> c'` lets ablations replace the condition
    grid (e.g. with a constant token) during training.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.vocab != base.config.vocab_size:
        raise ValueError("dataset vocabulary does not match the decoder")
    if dataset.x.shape[2] != base.config.num_codebooks:
        raise ValueError("dataset codebooks do not match the decoder")
    T = dataset.x.shape[1]
    if 2 * T > base.config.max_seq_len:
        raise ValueError("2T exceeds the decoder's max_seq_len")
    model = het.AdaptedModel.attach(base, width, seed=cfg.seed)
    params = model.trainables()
    log = GateLog(names=sorted(model.gates))
    log.log(0, model.gates)

    def item_loss(epoch, idx, tape):
        x = dataset.x[idx]
        c = dataset.c[idx]
        if condition_override is not None:
            c = condition_override(c)
        rng = rngstreams.stream(cfg.seed, rngstreams.MASK,
                                epoch * len(dataset) + idx)
        mask = seq.sample_mask(T, cfg.mask_lo, cfg.mask_hi, rng)
        tokens = seq.assemble(seq.build_prefix(x, c, mask), x, mask).tokens
        return seq.prediction_loss(model.forward(tokens, mask, tape), x, tape)

    def step_hook(step):
        if step % GATE_LOG_EVERY == 0:
            log.log(step, model.gates)
        if on_step is not None:
            on_step(step)

    history = _train(len(dataset), item_loss, params, cfg, step_hook)
    final_step = len(history)
    if not log.steps or log.steps[-1] != final_step:
        log.log(final_step, model.gates)
    return model, log, history


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------

_DECODER_KEYS = ("num_layers", "model_dim", "num_heads", "ffn_dim",
                 "vocab_size", "num_codebooks", "max_seq_len")


def save_decoder(path, model: dec.Decoder) -> None:
    entries = {k: v.data for k, v in model.named_parameters().items()}
    config = {k: getattr(model.config, k) for k in _DECODER_KEYS}
    dataio.write_checkpoint(path, entries, config)


def load_decoder(path) -> dec.Decoder:
    entries, config = dataio.read_checkpoint(path)
    missing = [k for k in _DECODER_KEYS if k not in config]
    if missing:
        raise dataio.FormatError(f"checkpoint lacks config keys {missing}")
    cfg = dec.DecoderConfig(**{k: int(config[k]) for k in _DECODER_KEYS})
    model = dec.Decoder.from_seed(cfg, seed=0)
    expected = set(model.params)
    if set(entries) != expected:
        raise dataio.FormatError("checkpoint entries do not match the "
                                 "decoder parameter inventory")
    for name, tensor in model.params.items():
        if entries[name].shape != tensor.shape:
            raise dataio.FormatError(f"entry {name} has shape "
                                     f"{entries[name].shape}, expected {tensor.shape}")
        tensor.data = entries[name].astype(np.float32)
    return model


def save_adapters(path, model: het.AdaptedModel) -> None:
    entries = {k: v.data for k, v in model.named_trainables().items()}
    config = {k: getattr(model.base.config, k) for k in _DECODER_KEYS}
    config["adapter_width"] = model.width
    dataio.write_checkpoint(path, entries, config)


def load_adapters(path, base: dec.Decoder) -> het.AdaptedModel:
    entries, config = dataio.read_checkpoint(path)
    if "adapter_width" not in config:
        raise dataio.FormatError("checkpoint lacks config.adapter_width")
    for k in _DECODER_KEYS:
        if k in config and int(config[k]) != getattr(base.config, k):
            raise ValueError(f"adapter checkpoint was trained for {k}="
                             f"{int(config[k])}, base has {getattr(base.config, k)}")
    width = int(config["adapter_width"])
    model = het.AdaptedModel.attach(base, width, seed=0)
    expected = set(model.named_trainables())
    if set(entries) != expected:
        raise dataio.FormatError("checkpoint entries do not match the "
                                 "adapter inventory")
    for name, tensor in model.named_trainables().items():
        if entries[name].shape != tensor.shape:
            raise dataio.FormatError(f"entry {name} has shape "
                                     f"{entries[name].shape}, expected {tensor.shape}")
        tensor.data = entries[name].astype(base.dtype)
    return model
