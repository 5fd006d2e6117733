"""
Attention sparsity and Q/K compression error
============================================

Sharper attention maps leave fewer active entries, and the map error caused
by perturbing W_q and W_k shrinks with them.
"""

import numpy as np

from casp.attention import attention_map, compression_error, sparsity_stats

rng = np.random.default_rng(0)
n, d = 32, 16
x = rng.standard_normal((n, d))
wq, wk = rng.standard_normal((2, d, d))
dk = rng.standard_normal((d, d)) * 1e-3

# scaling W_q up sharpens the softmax; shrinking the W_k perturbation by
# the same factor keeps the logit change dY identical
for temp in (0.1, 0.5, 1.0, 2.0, 4.0):
    st = sparsity_stats(attention_map(x, wq * temp, wk))
    rep = compression_error(x, wq * temp, wk, wq * temp, wk + dk / temp)
    print(f"scale {temp:4.1f}  density {st.density:.3f}  E {rep.e:.2e}  first-order bound {rep.bound_exact:.2e}")

# %%
# The bound sums per-row softmax Jacobian norms times the logit change.
# A one-hot row has a zero Jacobian, so sparse rows contribute nothing.
