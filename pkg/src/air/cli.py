"""Single-binary command line wiring the library into experiments.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every verb takes
--seed, writes only to paths given by flags, and reruns byte-identically
under the same flags.  Config files hold `key = value` lines; explicit
flags win over file values, which win over built-in defaults.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import autodiff as ad
from . import dataio
from . import decoder as dec
from . import evalharness as ev
from . import hetadapter as het
from . import rngstreams
from . import sequence as seq
from . import symbolic as sym
from . import synthdata as sd
from . import training as tr


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the contract reserves 2 for
    # runtime failures, so remap usage errors to 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _resolve(args, keys: dict) -> dict:
    """Merge defaults < config-file values < explicit flags."""
    file_vals: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            text = f.read()
        file_vals = dataio.parse_config_text(
            text, {k: t for k, (t, _) in keys.items()})
    out = {}
    for k, (_, hard) in keys.items():
        flag = getattr(args, k)
        out[k] = flag if flag is not None else file_vals.get(k, hard)
    return out


def _write_events_out(out: str, events) -> None:
    if out == "-":
        sym.write_events(sys.stdout, events)
    else:
        sym.write_events(out, events)


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = sd.TaskSpec(kind=args.spec, vocab=args.vocab, alpha=args.alpha,
                       beta=args.beta, gamma=args.gamma, seg_lo=args.seg_lo,
                       seg_hi=args.seg_hi, p_noise=args.p_noise,
                       seed=args.seed)
    sd.gen_dataset(spec, args.n, args.t, args.out)
    print(f"gen-data: {args.n} x {args.t} {args.spec} records "
          f"(vocab {args.vocab}) -> {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    ds = dataio.read_dataset(args.data)
    keys = {"layers": (int, 4), "dim": (int, 64), "heads": (int, 4),
            "ffn": (int, 256), "max_seq_len": (int, 2 * ds.x.shape[1]),
            "lr": (float, 1e-3), "batch_size": (int, 16),
            "epochs": (int, 1), "warmup_frac": (float, 0.0)}
    v = _resolve(args, keys)
    dcfg = dec.DecoderConfig(num_layers=v["layers"], model_dim=v["dim"],
                             num_heads=v["heads"], ffn_dim=v["ffn"],
                             vocab_size=ds.vocab,
                             num_codebooks=ds.x.shape[2],
                             max_seq_len=v["max_seq_len"])
    tcfg = tr.TrainConfig(lr=v["lr"], warmup_frac=v["warmup_frac"],
                          batch_size=v["batch_size"], epochs=v["epochs"],
                          seed=args.seed, phase="pretrain",
                          threads=args.threads)
    model, history = tr.pretrain_base(tcfg, ds, dcfg)
    tr.save_decoder(args.out, model)
    if args.loss_curve:
        from . import plots
        plots.save_loss_curve(args.loss_curve, history, "pretraining loss")
    print(f"pretrain: steps={len(history)} final_loss={history[-1]:.6f} "
          f"params={dec.param_count(dcfg)} -> {args.out}")
    return 0


def cmd_finetune(args) -> int:
    base = tr.load_decoder(args.base)
    ds = dataio.read_dataset(args.data)
    keys = {"width": (int, 16), "lr": (float, 2e-3),
            "batch_size": (int, 16), "epochs": (int, 1),
            "warmup_frac": (float, 0.0), "mask_lo": (float, 0.4),
            "mask_hi": (float, 0.8)}
    v = _resolve(args, keys)
    tcfg = tr.TrainConfig(lr=v["lr"], warmup_frac=v["warmup_frac"],
                          batch_size=v["batch_size"], epochs=v["epochs"],
                          seed=args.seed, phase="peft",
                          mask_lo=v["mask_lo"], mask_hi=v["mask_hi"],
                          threads=args.threads)
    model, gatelog, history = tr.peft_finetune(base, v["width"], tcfg, ds)
    tr.save_adapters(args.out, model)
    if args.gate_log:
        gatelog.write_csv(args.gate_log)
    if args.gate_plot:
        from . import plots
        plots.save_gate_curves(args.gate_plot, gatelog.steps, gatelog.names,
                               gatelog.magnitudes)
    if args.loss_curve:
        from . import plots
        plots.save_loss_curve(args.loss_curve, history, "adapter loss")
    trainable = het.adapter_param_count(base.config.num_layers, v["width"],
                                        base.config.model_dim)
    max_gate = max(max(row) for row in gatelog.magnitudes)
    print(f"finetune: steps={len(history)} final_loss={history[-1]:.6f} "
          f"trainable={trainable} max_gate={max_gate:.6f} -> {args.out}")
    return 0


def cmd_inpaint(args) -> int:
    base = tr.load_decoder(args.base)
    model = tr.load_adapters(args.adapters, base)
    ds = dataio.read_dataset(args.data)
    if not 0 <= args.index < len(ds):
        raise ValueError(f"record index {args.index} outside 0..{len(ds) - 1}")
    x, c = ds.x[args.index], ds.c[args.index]
    T = x.shape[0]
    if args.mask_file:
        mask = dataio.read_mask(args.mask_file)
        if mask.shape[0] != T:
            raise ValueError(f"mask length {mask.shape[0]} != record length {T}")
    else:
        rng = rngstreams.stream(args.seed, rngstreams.EVAL,
                                args.index * 8 + args.mask_pattern)
        mask = seq.eval_mask(args.mask_pattern, T, rng)
    area = model.decode_prediction_area(seq.build_prefix(x, c, mask), mask)
    # splice: model output only where masked, original frames elsewhere
    pred = np.where(mask.astype(bool)[:, None], area, x)
    dataio.write_dataset(args.out, pred[None], c[None], ds.vocab)
    dataio.write_mask(args.out_mask, mask)
    print(f"inpaint: record={args.index} masked_frames={int(mask.sum())} "
          f"-> {args.out}")
    return 0


def cmd_eval(args) -> int:
    base = tr.load_decoder(args.base)
    ds = dataio.read_dataset(args.data)
    patterns = tuple(int(s) for s in args.patterns.split(","))
    predictors = []
    if args.adapters:
        model = tr.load_adapters(args.adapters, base)
        predictors.append(ev.AdaptedPredictor(model))
        if args.ablate_condition is not None:
            tok = args.ablate_condition
            if not 0 <= tok < ds.vocab:
                raise ValueError(f"ablation token {tok} outside the vocabulary")
            predictors.append(ev.AdaptedPredictor(
                model, name="adapted-nocond",
                condition_override=lambda c: np.full_like(c, tok)))
    if args.with_base or not predictors:
        predictors.append(ev.BasePredictor(base))
    if args.with_oracle:
        spec = sd.TaskSpec(kind=args.task, vocab=ds.vocab, alpha=args.alpha,
                           beta=args.beta, gamma=args.gamma)
        predictors.append(ev.OraclePredictor(spec))
    rows = ev.run_eval(predictors, ds, args.task, patterns, args.mode,
                       args.seed)
    dataio.write_report_csv(args.out, rows, ev.REPORT_COMMENTS)
    if args.plot:
        from . import plots
        plots.save_metric_bars(args.plot, rows)
    for r in rows:
        print(f"{r['model']} pattern={r['pattern']} mode={r['mode']} "
              f"{r['metric']}={r['value']:.6f}")
    return 0


_GRADCHECK_GEOMETRY = {
    "small": dict(L=2, d=16, h=2, T=8, m=4, V=12),
    "tiny": dict(L=1, d=8, h=2, T=4, m=2, V=7),
}


def cmd_gradcheck(args) -> int:
    g = _GRADCHECK_GEOMETRY[args.config]
    cfg = dec.DecoderConfig(num_layers=g["L"], model_dim=g["d"],
                            num_heads=g["h"], ffn_dim=2 * g["d"],
                            vocab_size=g["V"], num_codebooks=1,
                            max_seq_len=2 * g["T"])
    base = dec.Decoder.from_seed(cfg, args.seed, dtype=np.float64)
    model = het.AdaptedModel.attach(base, g["m"], seed=args.seed)
    rng = rngstreams.stream(args.seed, rngstreams.INIT, 7)
    # zero gates would zero every bank gradient and make the check vacuous
    for gate in model.gates.values():
        gate.data = np.asarray(rng.uniform(0.05, 0.3) * rng.choice([-1.0, 1.0]))
    T = g["T"]
    x = rng.integers(0, g["V"], size=(T, 1))
    c = rng.integers(0, g["V"], size=(T, 1))
    mask = np.zeros(T, dtype=np.uint8)
    mask[T // 4:T // 4 + T // 2] = 1  # both mask states in both areas
    tokens = seq.assemble(seq.build_prefix(x, c, mask), x, mask).tokens

    def loss_fn(tape):
        return seq.prediction_loss(model.forward(tokens, mask, tape), x, tape)

    trainables = model.trainables()
    checked = sum(int(np.prod(p.shape)) if p.shape else 1 for p in trainables)
    worst = ad.finite_diff_check(loss_fn, trainables)
    print(f"gradcheck: config={args.config} params={checked} "
          f"max_rel_err={worst:.3e}")
    if worst < 1e-4:
        return 0
    print(f"air: error: gradient check failed ({worst:.3e} >= 1e-4)",
          file=sys.stderr)
    return 2


def cmd_reduce_piano(args) -> int:
    events = sym.read_events(args.in_path)
    reduced = sym.piano_reduce(events)
    _write_events_out(args.out, reduced)
    if args.out != "-":
        print(f"reduce-piano: {len(events)} -> {len(reduced)} events "
              f"-> {args.out}")
    return 0


def cmd_render_chords(args) -> int:
    chords = sym.read_chords(args.chords)
    beats = sym.read_beats(args.beats)
    events = sym.render_block_chords(chords, beats)
    _write_events_out(args.out, events)
    if args.out != "-":
        print(f"render-chords: {len(events)} events -> {args.out}")
    return 0


def cmd_param_count(args) -> int:
    keys = {"layers": (int, 4), "dim": (int, 64), "heads": (int, 4),
            "ffn": (int, 256), "vocab": (int, 64), "codebooks": (int, 1),
            "max_seq_len": (int, 256), "width": (int, 0)}
    v = _resolve(args, keys)
    cfg = dec.DecoderConfig(num_layers=v["layers"], model_dim=v["dim"],
                            num_heads=v["heads"], ffn_dim=v["ffn"],
                            vocab_size=v["vocab"],
                            num_codebooks=v["codebooks"],
                            max_seq_len=v["max_seq_len"])
    total = dec.param_count(cfg)
    print(f"param-count: base={total}")
    if v["width"] > 0:
        extra = het.adapter_param_count(v["layers"], v["width"], v["dim"])
        print(f"param-count: adapter={extra} "
              f"trainable_fraction={extra / (extra + total):.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="air", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, metavar="verb")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0,
                       help="RNG seed (default 0)")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic token dataset")
    p.add_argument("--spec", required=True, choices=sd.KINDS)
    p.add_argument("--n", required=True, type=int, help="record count")
    p.add_argument("--t", required=True, type=int, help="frames per record")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--alpha", type=int, default=1)
    p.add_argument("--beta", type=int, default=1)
    p.add_argument("--gamma", type=int, default=0)
    p.add_argument("--seg-lo", type=int, default=8)
    p.add_argument("--seg-hi", type=int, default=24)
    p.add_argument("--p-noise", type=float, default=0.0)

    p = add("pretrain", cmd_pretrain, "train the frozen base decoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value file; flags win")
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn", type=int)
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-frac", type=float)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--loss-curve", help="write a loss-curve PNG here")

    p = add("finetune", cmd_finetune, "train adapters on a frozen decoder")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value file; flags win")
    p.add_argument("--width", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-frac", type=float)
    p.add_argument("--mask-lo", type=float)
    p.add_argument("--mask-hi", type=float)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--gate-log", help="write gate magnitudes CSV here")
    p.add_argument("--gate-plot", help="write a gate-curve PNG here")
    p.add_argument("--loss-curve", help="write a loss-curve PNG here")

    p = add("inpaint", cmd_inpaint, "inpaint one record's masked frames")
    p.add_argument("--base", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--mask-pattern", type=int, choices=(1, 2, 3))
    group.add_argument("--mask-file")
    p.add_argument("--out", required=True,
                   help="predicted tokens (dataset format, one record)")
    p.add_argument("--out-mask", required=True, help="mask actually used")

    p = add("eval", cmd_eval, "score predictors under evaluation masks")
    p.add_argument("--base", required=True)
    p.add_argument("--adapters")
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True, choices=sd.KINDS)
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--patterns", default="1,2,3")
    p.add_argument("--mode", default="inpaint", choices=ev.MODES)
    p.add_argument("--with-base", action="store_true")
    p.add_argument("--with-oracle", action="store_true")
    p.add_argument("--ablate-condition", type=int, metavar="TOKEN",
                   help="also score the adapters with C replaced by TOKEN")
    p.add_argument("--alpha", type=int, default=1)
    p.add_argument("--beta", type=int, default=1)
    p.add_argument("--gamma", type=int, default=0)
    p.add_argument("--plot", help="write grouped metric bars PNG here")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient audit")
    p.add_argument("--config", default="small",
                   choices=sorted(_GRADCHECK_GEOMETRY))

    p = add("reduce-piano", cmd_reduce_piano,
            "monophonic-per-pitch piano reduction")
    p.add_argument("--in", dest="in_path", required=True, metavar="IN")
    p.add_argument("--out", required=True, help="JSONL path or - for stdout")

    p = add("render-chords", cmd_render_chords,
            "render block-chord note events on beats")
    p.add_argument("--chords", required=True)
    p.add_argument("--beats", required=True)
    p.add_argument("--out", required=True, help="JSONL path or - for stdout")

    p = add("param-count", cmd_param_count, "closed-form parameter totals")
    p.add_argument("--config", help="key = value file; flags win")
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--codebooks", type=int)
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--width", type=int)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, dataio.FormatError) as e:
        print(f"air: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
