"""Routing, adapter cross-attention, gating, attach/freeze semantics."""

import itertools
import math

import numpy as np
import pytest

from air import autodiff as ad
from air import decoder as dec
from air import hetadapter as het
from air import sequence as seq


def rng_for(seed):
    return np.random.default_rng(np.random.Philox(key=[seed, 0]))


def tiny_base(seed=0, dtype=np.float64, **kw):
    cfg = dict(num_layers=2, model_dim=8, num_heads=2, ffn_dim=16,
               vocab_size=9, num_codebooks=1, max_seq_len=32)
    cfg.update(kw)
    return dec.Decoder.from_seed(dec.DecoderConfig(**cfg), seed, dtype=dtype)


def route_reference(t, T, mask):
    """Independent case enumeration (1-based position)."""
    in_prefix = t <= T
    frame = t - 1 if in_prefix else t - T - 1
    masked = bool(mask[frame])
    if in_prefix and not masked:
        return 1
    if in_prefix and masked:
        return 2
    if not in_prefix and not masked:
        return 3
    return 4


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------


def test_route_examples():
    mask = np.array([0, 0, 1, 1, 0], dtype=np.uint8)  # frames 3,4 masked
    assert het.route(1, 5, mask) == 1
    assert het.route(3, 5, mask) == 2
    assert het.route(9, 5, mask) == 4
    assert het.route(6, 5, mask) == 3


def test_route_bounds():
    mask = np.zeros(5, dtype=np.uint8)
    with pytest.raises(ValueError):
        het.route(0, 5, mask)
    with pytest.raises(ValueError):
        het.route(11, 5, mask)
    with pytest.raises(ValueError):
        het.route(1, 4, mask)


def test_route_exhaustive_small():
    for T in range(1, 9):
        for bits in range(2 ** T):
            mask = np.array([(bits >> i) & 1 for i in range(T)], dtype=np.uint8)
            for t in range(1, 2 * T + 1):
                assert het.route(t, T, mask) == route_reference(t, T, mask)


def test_route_table_matches_route():
    rng = rng_for(1)
    for _ in range(30):
        T = int(rng.integers(1, 20))
        mask = rng.integers(0, 2, size=T).astype(np.uint8)
        table = het.route_table(T, mask)
        assert table.shape == (2 * T,)
        for t in range(1, 2 * T + 1):
            assert table[t - 1] == het.route(t, T, mask)


def test_route_partitions_positions():
    rng = rng_for(2)
    for _ in range(20):
        T = int(rng.integers(1, 16))
        mask = rng.integers(0, 2, size=T).astype(np.uint8)
        table = het.route_table(T, mask)
        assert np.isin(table, het.TYPES).all()


# ---------------------------------------------------------------------------
# cross-attention and gate
# ---------------------------------------------------------------------------


def test_cross_attention_single_row_bank():
    rng = rng_for(3)
    d, heads = 8, 2
    wq, wk, wv, wo = (rng.normal(size=(d, d)) for _ in range(4))
    bank = rng.normal(size=(1, d))
    h = rng.normal(size=d)
    u = het.adapter_cross_attention(h, bank, wq, wk, wv, wo, heads)
    assert np.allclose(u, (bank @ wv @ wo)[0], atol=1e-12)


def test_cross_attention_zero_bank():
    rng = rng_for(4)
    d = 8
    mats = [rng.normal(size=(d, d)) for _ in range(4)]
    u = het.adapter_cross_attention(rng.normal(size=d), np.zeros((3, d)),
                                    *mats, num_heads=2)
    assert np.allclose(u, 0.0, atol=1e-15)


def test_cross_attention_matches_generic_oracle():
    rng = rng_for(5)
    d, m, heads, dh = 12, 4, 3, 4
    wq, wk, wv, wo = (rng.normal(size=(d, d)) for _ in range(4))
    bank = rng.normal(size=(m, d))
    h = rng.normal(size=(6, d))
    got = het.adapter_cross_attention(h, bank, wq, wk, wv, wo, heads)

    q, k, v = h @ wq, bank @ wk, bank @ wv
    want = np.zeros((6, d))
    for t in range(6):
        for i in range(heads):
            sl = slice(i * dh, (i + 1) * dh)
            scores = np.array([q[t, sl] @ k[j, sl] / math.sqrt(dh)
                               for j in range(m)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            want[t, sl] = sum(w[j] * v[j, sl] for j in range(m))
    want = want @ wo
    assert np.abs(got - want).max() / np.abs(want).max() < 1e-10


def test_apply_gate():
    rng = rng_for(6)
    s, u = rng.normal(size=8), rng.normal(size=8)
    assert np.array_equal(het.apply_gate(s, u, 0.0), s)
    assert np.allclose(het.apply_gate(s, u, 1.0), s + u, atol=1e-15)
    lhs = het.apply_gate(s, u, 0.8) - s
    rhs = het.apply_gate(s, u, 0.4) - s
    assert np.allclose(lhs, 2 * rhs, atol=1e-12)


# ---------------------------------------------------------------------------
# attach / adapted forward
# ---------------------------------------------------------------------------


def test_attach_zero_gate_identity():
    base = tiny_base(seed=1, dtype=np.float32)
    model = het.AdaptedModel.attach(base, width=4, seed=2)
    rng = rng_for(7)
    for _ in range(10):
        T = 8
        x = rng.integers(0, 9, size=(T, 1))
        c = rng.integers(0, 9, size=(T, 1))
        mask = rng.integers(0, 2, size=T).astype(np.uint8)
        a = seq.assemble(seq.build_prefix(x, c, mask), x, mask)
        assert np.array_equal(model.logits_array(a.tokens, mask),
                              base.logits_array(a.tokens))


def test_attach_zero_gate_identity_decode_path():
    base = tiny_base(seed=3, dtype=np.float32)
    model = het.AdaptedModel.attach(base, width=4, seed=4)
    rng = rng_for(8)
    prefix = rng.integers(0, 9, size=(8, 1))
    mask = rng.integers(0, 2, size=8).astype(np.uint8)
    assert np.array_equal(model.decode_prediction_area(prefix, mask),
                          dec.decode_prediction_area(base, prefix))


def test_attach_trainable_inventory():
    base = tiny_base(seed=5)
    model = het.AdaptedModel.attach(base, width=3, seed=6)
    L = base.config.num_layers
    names = model.named_trainables()
    assert len(model.banks) == 4 * L
    assert len(model.gates) == 4 * L
    assert len(names) == 8 * L
    for li in range(L):
        for r in het.TYPES:
            assert names[f"adapter.layer{li}.type{r}"].shape == (3, 8)
            g = names[f"gate.layer{li}.type{r}"]
            assert g.shape == ()
            assert float(g.data) == 0.0
    assert not any(p.requires_grad for p in base.params.values())
    assert model.trainable_count() == het.adapter_param_count(L, 3, 8)


def test_adapter_param_count():
    # 4*2*4*8 matrix values plus 4*2 gates
    assert het.adapter_param_count(2, 4, 8) == 264
    assert het.adapter_param_count(1, 1, 1) == 8
    with pytest.raises(ValueError):
        het.adapter_param_count(0, 4, 8)


def test_adapter_param_count_ratios():
    L, d = 48, 64
    matrix = lambda m: 4 * L * m * d
    assert matrix(30) == 3 * matrix(10)
    assert matrix(50) == 5 * matrix(10)
    full10 = het.adapter_param_count(L, 10, d)
    assert abs(het.adapter_param_count(L, 30, d) / full10 - 3) < 0.01
    assert abs(het.adapter_param_count(L, 50, d) / full10 - 5) < 0.01


def test_adapted_forward_nonzero_gates_changes_output():
    base = tiny_base(seed=7)
    model = het.AdaptedModel.attach(base, width=4, seed=8)
    rng = rng_for(9)
    T = 6
    x = rng.integers(0, 9, size=(T, 1))
    mask = np.array([1, 1, 0, 0, 1, 0], dtype=np.uint8)
    a = seq.assemble(seq.build_prefix(x, x, mask), x, mask)
    before = model.logits_array(a.tokens, mask)
    for g in model.gates.values():
        g.data = np.asarray(0.5, dtype=base.dtype)
    after = model.logits_array(a.tokens, mask)
    assert not np.allclose(before, after)


def test_adapted_decode_matches_naive_loop_nonzero_gates():
    base = tiny_base(seed=9)
    model = het.AdaptedModel.attach(base, width=4, seed=10)
    rng = rng_for(10)
    for key, g in model.gates.items():
        g.data = np.asarray(rng.normal() * 0.3)
    T = 6
    x = rng.integers(0, 9, size=(T, 1))
    c = rng.integers(0, 9, size=(T, 1))
    mask = np.array([0, 1, 1, 0, 1, 0], dtype=np.uint8)
    prefix = seq.build_prefix(x, c, mask)
    got = model.decode_prediction_area(prefix, mask)

    grid = prefix.copy()
    want = []
    for _ in range(T):
        logits = model.logits_array(grid, mask)
        nxt = logits[-1].argmax(axis=-1)
        want.append(nxt)
        grid = np.vstack([grid, nxt[None, :]])
    assert np.array_equal(got, np.array(want))


def test_adapted_row_hook_matches_tape_forward():
    base = tiny_base(seed=11, num_layers=1)
    model = het.AdaptedModel.attach(base, width=3, seed=12)
    rng = rng_for(11)
    for g in model.gates.values():
        g.data = np.asarray(rng.normal())
    T = 5
    mask = np.array([1, 0, 1, 1, 0], dtype=np.uint8)
    tokens = rng.integers(0, 9, size=(2 * T, 1))
    full = model.logits_array(tokens, mask)
    sess = dec.InferenceSession(base, row_hook=model.row_hook(mask))
    rows = np.stack([sess.append(tokens[t]) for t in range(2 * T)])
    assert np.abs(rows - full).max() < 1e-10


def test_adapted_gradcheck_and_gate_gradients():
    base = tiny_base(seed=13, num_layers=1, model_dim=8, num_heads=2,
                     ffn_dim=12, vocab_size=7)
    model = het.AdaptedModel.attach(base, width=2, seed=14)
    rng = rng_for(12)
    T = 3
    x = rng.integers(0, 7, size=(T, 1))
    c = rng.integers(0, 7, size=(T, 1))
    mask = np.array([1, 0, 1], dtype=np.uint8)
    tokens = seq.assemble(seq.build_prefix(x, c, mask), x, mask).tokens

    def loss_fn(tape):
        return seq.prediction_loss(model.forward(tokens, mask, tape), x, tape)

    trainables = model.trainables()
    assert ad.finite_diff_check(loss_fn, trainables) < 1e-4
    # gates sit at zero yet still receive signal
    tape = ad.Tape()
    ad.zero_grads(trainables)
    ad.backward(loss_fn(tape), tape, params=trainables)
    gate_grads = [abs(float(g.grad)) for g in model.gates.values()]
    assert max(gate_grads) > 0


def test_optimizer_step_leaves_base_bitwise_unchanged():
    base = tiny_base(seed=15, dtype=np.float32)
    model = het.AdaptedModel.attach(base, width=4, seed=16)
    snapshot = {k: v.data.tobytes() for k, v in base.params.items()}
    rng = rng_for(13)
    T = 6
    x = rng.integers(0, 9, size=(T, 1))
    c = rng.integers(0, 9, size=(T, 1))
    mask = seq.sample_mask(T, 0.3, 0.7, rng)
    tokens = seq.assemble(seq.build_prefix(x, c, mask), x, mask).tokens
    trainables = model.trainables()
    opt = ad.Adam(trainables, lr=1e-2)
    for _ in range(3):
        tape = ad.Tape()
        loss = seq.prediction_loss(model.forward(tokens, mask, tape), x, tape)
        ad.zero_grads(trainables)
        ad.backward(loss, tape, params=trainables)
        opt.step()
    assert all(base.params[k].data.tobytes() == b for k, b in snapshot.items())
    # and the adapters did move
    assert any(float(g.data) != 0.0 for g in model.gates.values())
