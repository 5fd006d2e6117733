"""
Entropy-smoothed bit allocation
===============================

Layers with higher importance get more bits, and mu controls how far the
plan moves away from uniform.
"""

import numpy as np

from casp.bitalloc import alloc_oracle, allocate_bits, round_bits

scores = np.array([0.45, 0.12, 0.08, 0.10, 0.30])
params = np.full(5, 10_240)
for mu in (1e2, 1e3, 1e4, 1e6):
    plan = allocate_bits(scores, params, 2.2, mu)
    ints = round_bits(plan, {2, 3}).bits_int
    print(f"mu {mu:8.0f}  bits {np.round(plan.bits_cont, 2)}  integer {ints}")

# %%
# The closed form agrees with an exhaustive grid search on a small case.
plan = allocate_bits([0.1, 0.5, 0.4], [1, 1, 1], 2.0, 0.1)
grid = alloc_oracle([0.1, 0.5, 0.4], [1, 1, 1], 2.0, 0.1, grid_step=0.01)
print("closed form", np.round(plan.bits_cont, 3), " grid", grid.bits_cont)
