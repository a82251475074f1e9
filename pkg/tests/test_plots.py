"""Figures exist, carry PNG magic, and re-render byte-identically."""

import pytest

from air import plots

ROWS = [
    {"model": "adapted", "task": "affine", "pattern": 1, "mode": "inpaint",
     "metric": "masked_accuracy", "value": 0.97, "n": 10, "seed": 0},
    {"model": "base", "task": "affine", "pattern": 1, "mode": "inpaint",
     "metric": "masked_accuracy", "value": 0.12, "n": 10, "seed": 0},
    {"model": "adapted", "task": "affine", "pattern": 2, "mode": "inpaint",
     "metric": "masked_accuracy", "value": 0.95, "n": 10, "seed": 0},
]

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def test_gate_curves_deterministic(tmp_path):
    steps = [0, 10, 20]
    names = ["gate.layer0.type1", "gate.layer0.type2"]
    mags = [[0.0, 0.0], [0.01, 0.02], [0.05, 0.03]]
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    plots.save_gate_curves(a, steps, names, mags)
    plots.save_gate_curves(b, steps, names, mags)
    assert a.read_bytes()[:8] == PNG_MAGIC
    assert a.read_bytes() == b.read_bytes()


def test_metric_bars_deterministic(tmp_path):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    plots.save_metric_bars(a, ROWS)
    plots.save_metric_bars(b, ROWS)
    assert a.read_bytes()[:8] == PNG_MAGIC
    assert a.read_bytes() == b.read_bytes()
    with pytest.raises(ValueError):
        plots.save_metric_bars(tmp_path / "c.png", [])


def test_loss_curve_deterministic(tmp_path):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    plots.save_loss_curve(a, [3.0, 2.5, 2.0], "loss")
    plots.save_loss_curve(b, [3.0, 2.5, 2.0], "loss")
    assert a.read_bytes() == b.read_bytes()
