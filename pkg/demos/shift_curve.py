"""Accuracy of a binary MLP on MNIST as the sign threshold moves.

A quick, small version of the full sweep in configs/mnist_mlp2.conf:
3 epochs, 2 seeds, 5 shifts.  Run from the repository root:

    python3 demos/shift_curve.py
"""
from shiftbnn import exper
from shiftbnn.cli import load_config

cfg = load_config("configs/mnist_mlp2.conf").replace(
    epochs=3, shifts=(-1.0, -0.5, 0.0, 0.5, 1.0), seeds=(0, 1))

summary, records = exper.shift_sweep(cfg, workers=exper.default_workers())

print(f"{'shift':>6} {'test acc':>9} {'std':>7} {'1st-epoch train':>16}")
for s in summary:
    print(f"{s.shift:+6.2f} {s.mean:9.4f} {s.std:7.4f} {s.first_epoch_mean:16.4f}")

acc = {s.shift: s.mean for s in summary}
print("best shift:", exper.select_shift(acc))
print("rank agreement of first-epoch search:", round(exper.search_validity(summary), 3))
