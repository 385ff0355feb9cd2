"""
Wire formats and averaging subsets
==================================

What one averaging event actually sends: a random subset of one stage's
coordinates, optionally squeezed through a low-precision format.
"""

# %%
import numpy as np

from meshsim.numerics import Rng, quantize, sample_subset

x = np.array([0.3, -1.7, 1e-3, 500.0, 1e6])
for scheme in ("none", "bf16", "fp8_e4m3"):
    print(f"{scheme:9s}", quantize(x, scheme))

# %%
# fp8 keeps about two significant digits and saturates at 448, so the last two
# entries are clipped. bf16 has the fp32 range and keeps them.

# %%
# Subsets are drawn from counter-based streams, so the same (seed, stage, step)
# always gives the same mask no matter which replica asks.
rng = Rng.for_stream(0, "mask", 0, 7)
fixed = sample_subset(rng, block_len=1000, fraction=0.05, mode="fixed_count", step=7)
print(len(fixed.indices), fixed.indices[:8])

sizes = [len(sample_subset(Rng.for_stream(0, "mask", 0, t), 1000, 0.05, "bernoulli").indices) for t in range(200)]
print("bernoulli subset size: mean", np.mean(sizes), "std", round(float(np.std(sizes)), 2))
