"""Poke at the entropy model: bin probabilities, bit costs, quantization.

Everything here is closed-form; no trained weights involved.
Run:  python demos/03_entropy_model.py
"""

import numpy as np

from mdvsc.entropy_model import LIKELIHOOD_FLOOR, SIGMA_MIN, likelihood, quantize

# probability of the unit-width bin around w under N(0, sigma) * U(-1/2, 1/2)
print("bin probability P(w, sigma):")
for sigma in (0.05, 0.5, 1.0, 5.0):
    row = [likelihood(np.array([w]), np.array([sigma]))[0] for w in (0.0, 1.0, 2.0)]
    print(f"  sigma={sigma:<4}: P(0)={row[0]:.6f} P(1)={row[1]:.6f} P(2)={row[2]:.6f}")

print(f"\nreference points: P(0, 1) = {likelihood(np.array([0.0]), np.array([1.0]))[0]:.6f}"
      f" (0.382925), P(0, 0.5) = {likelihood(np.array([0.0]), np.array([0.5]))[0]:.6f}"
      " (0.682689)")

# bit costs: -log2(P); the floor caps the worst case near 29.9 bits
w = np.linspace(0, 6, 7)
bits = -np.log2(likelihood(w, np.full_like(w, 0.5)))
print("\nbit cost at sigma=0.5 for w = 0..6:")
print("  " + "  ".join(f"{b:6.2f}" for b in bits))
print(f"floor {LIKELIHOOD_FLOOR} caps costs at {-np.log2(LIKELIHOOD_FLOOR):.3f} bits; "
      f"sigma is never below {SIGMA_MIN}")

# quantization: uniform noise during training, rounding at eval
rng = np.random.default_rng(0)
x = rng.normal(scale=2.0, size=5)
print("\nsoft quantization:")
print("  input :", np.round(x, 4))
print("  eval  :", quantize(x, "eval"))
print("  train :", np.round(quantize(x, "train", np.random.default_rng(1)), 4))

# the training proxy is unbiased
deltas = quantize(np.zeros(100_000), "train", rng)
print(f"  training-noise mean over 1e5 draws: {deltas.mean():+.5f} (expected ~0)")
