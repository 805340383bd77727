"""How a leaky ReLU skews a Gaussian: mean rises above the median as the slope drops.

    python3 demos/leaky_skew.py
"""
import numpy as np

from shiftbnn.nn import leaky_relu

x = np.random.default_rng(0).standard_normal(1_000_000)
print(f"{'slope':>6} {'mean':>8} {'median':>8} {'mean-median':>12}")
for s in (0.0, 0.25, 0.5, 0.75, 1.0):
    y = leaky_relu(x, s)
    print(f"{s:6.2f} {y.mean():8.4f} {np.median(y):8.4f} {y.mean() - np.median(y):12.4f}")
