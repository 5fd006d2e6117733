"""Damped Cholesky shared by the whitening and greedy-quantization paths."""

from __future__ import annotations

import numpy as np
import scipy.linalg


class CholeskyFailure(np.linalg.LinAlgError):
    def __init__(self, ladder):
        self.ladder = list(ladder)
        super().__init__(
            "Cholesky failed for every damping in ladder "
            + ", ".join(f"{d:.3e}" for d in self.ladder)
        )


def damping_ladder(mat: np.ndarray) -> list[float]:
    """0, then 1e-6 and 1e-4 of the mean diagonal."""
    scale = float(np.trace(mat)) / mat.shape[0]
    return [0.0, 1e-6 * scale, 1e-4 * scale]


def damped_cholesky(mat: np.ndarray, ladder=None, tol: float = 1e-4):
    """Lower Cholesky factor of ``mat + damping * I`` for the first damping that works.

    A factorisation is accepted only if ``L^-1 (mat + damping I) L^-T`` is the
    identity to ``tol`` in Frobenius norm; rank-deficient inputs with zero
    damping fail this check even when LAPACK returns without error.

    Returns ``(L, damping)``.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if ladder is None:
        ladder = damping_ladder(mat)
    d = mat.shape[0]
    eye = np.eye(d)
    tried = []
    for damp in ladder:
        tried.append(damp)
        damped = mat + damp * eye
        try:
            chol = np.linalg.cholesky(damped)
        except np.linalg.LinAlgError:
            continue
        diag = np.diag(chol)
        if not np.all(np.isfinite(chol)) or diag.min() <= 0:
            continue
        white = scipy.linalg.solve_triangular(chol, eye, lower=True)
        resid = np.linalg.norm(white @ damped @ white.T - eye)
        if np.isfinite(resid) and resid <= tol:
            return chol, damp
    raise CholeskyFailure(tried)
