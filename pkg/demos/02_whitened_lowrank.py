"""
Whitened low-rank factoring
===========================

Truncating the SVD of W minimizes ||W - AB||, but what matters is the
error on real inputs, ||X(W - AB)||. Whitening with the Cholesky factor of
the input covariance makes the truncation optimal for that error instead.
"""

import numpy as np

from casp.lowrank import WhiteningTransform, decompose_whitened, fit_whitening

rng = np.random.default_rng(3)
d, r = 32, 8
q, _ = np.linalg.qr(rng.standard_normal((d, d)))
x = rng.standard_normal((2048, d)) * np.geomspace(1, 1e-3, d) @ q.T
w = rng.standard_normal((d, d))
print("condition number of X:", round(float(np.linalg.cond(x))))

plain = decompose_whitened(w, WhiteningTransform.identity(d), r)
white = decompose_whitened(w, fit_whitening(x), r)
for name, f in (("plain SVD", plain), ("whitened", white)):
    print(f"{name:10s} ||W-AB|| {np.linalg.norm(w - f.reconstruct()):7.3f}"
          f"   ||X(W-AB)|| {np.linalg.norm(x @ (w - f.reconstruct())):7.3f}")

# %%
# The whitened factors are worse in weight space and much better on the data.
