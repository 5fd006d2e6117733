"""
Three quantizers
================

Round-to-nearest on a per-group grid, error-compensating greedy quantization
driven by calibration activations, and k-means vector quantization.
"""

import numpy as np

from casp.quantize import bit_breakdown, dequantize, quantize_greedy, quantize_rtn, quantize_vq

rng = np.random.default_rng(1)
mix = rng.standard_normal((256, 256)) * np.geomspace(1, 0.05, 256)
x = rng.standard_normal((2048, 256)) @ mix
w = rng.standard_normal((256, 256))


def report(name, qt):
    err = np.linalg.norm(x @ (w - dequantize(qt))) / np.linalg.norm(x @ w)
    bd = bit_breakdown(qt)
    print(f"{name:7s} relative output error {err:.3f}   bits/weight {bd.total_bits / w.size:.3f}")


for bits in (2, 3):
    print(f"-- {bits} bits")
    report("rtn", quantize_rtn(w, bits))
    report("greedy", quantize_greedy(w, x, bits))

# %%
# One 2-bit codebook of 4-dim vectors has 256 entries. Its float16 storage
# is part of the bit count.
print("-- 2 bits, vector")
report("vq", quantize_vq(w, 2, 4, seed=0))

# %%
# Greedy quantization pushes each column's rounding error onto columns not
# yet quantized, weighted by the input Gram matrix, so it wins on
# correlated inputs.
