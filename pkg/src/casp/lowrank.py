"""Data-aware low-rank factorization of the query and key projections.

The calibration second-moment matrix ``C = X^T X / M`` is factored as
``C = L L^T``. For a weight ``w`` acting as ``x @ w`` the activation-space error
of any replacement ``w'`` is ``||X (w - w')||_F^2 = M ||L^T (w - w')||_F^2``, so the
best rank-r replacement is the truncated SVD of ``L^T w`` mapped back through
``L^-T``. With ``L = I`` this is ordinary truncated SVD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._linalg import CholeskyFailure, damped_cholesky, damping_ladder
from .model import LowRank, ModelCheckpoint, materialize, trace


class WhiteningError(ValueError):
    pass


class CovarianceAccumulator:
    """Mergeable running sum of ``x^T x`` and row count."""

    def __init__(self, d: int):
        self.d = d
        self.sum = np.zeros((d, d))
        self.count = 0

    def add(self, x) -> "CovarianceAccumulator":
        x = np.asarray(getattr(x, "x", x), dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ValueError(f"expected rows of width {self.d}, got {x.shape}")
        self.sum += x.T @ x
        self.count += x.shape[0]
        return self

    def merge(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        out = CovarianceAccumulator(self.d)
        out.sum = self.sum + other.sum
        out.count = self.count + other.count
        return out

    def covariance(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no calibration rows")
        c = self.sum / self.count
        return 0.5 * (c + c.T)


@dataclass(frozen=True, eq=False)
class WhiteningTransform:
    cov: np.ndarray
    chol: np.ndarray  # lower triangular, chol @ chol.T == cov + damping * I
    white: np.ndarray  # chol^-1
    damping: float

    @classmethod
    def identity(cls, d: int) -> "WhiteningTransform":
        eye = np.eye(d)
        return cls(eye, eye, eye, 0.0)

    @property
    def d(self) -> int:
        return self.cov.shape[0]


def fit_whitening(acts, damping: float | None = None) -> WhiteningTransform:
    """Cholesky whitening from a list of activation batches (or one batch / array).

    ``damping=None`` walks the ladder ``0, 1e-6 tr(C)/d, 1e-4 tr(C)/d``; an
    explicit value is used alone.
    """
    if isinstance(acts, CovarianceAccumulator):
        acc = acts
    else:
        if not isinstance(acts, (list, tuple)):
            acts = [acts]
        rows = [np.asarray(getattr(a, "x", a), dtype=np.float64) for a in acts]
        acc = CovarianceAccumulator(rows[0].shape[1])
        for r in rows:
            acc.add(r)
    cov = acc.covariance()
    ladder = damping_ladder(cov) if damping is None else [float(damping)]
    try:
        chol, used = damped_cholesky(cov, ladder)
    except CholeskyFailure as exc:
        raise WhiteningError(f"covariance is not positive definite: {exc}") from exc
    white = scipy.linalg.solve_triangular(chol, np.eye(cov.shape[0]), lower=True)
    return WhiteningTransform(cov, chol, white, used)


@dataclass(frozen=True, eq=False)
class LowRankFactors:
    a: np.ndarray  # d_in x r
    b: np.ndarray  # r x d_out
    rank: int
    original_dims: tuple
    kept_energy: float

    @property
    def param_count(self) -> int:
        return self.rank * (self.original_dims[0] + self.original_dims[1])

    def reconstruct(self) -> np.ndarray:
        return self.a @ self.b


def _fix_signs(u: np.ndarray, vt: np.ndarray):
    """Make the first non-negligible entry of every left singular vector non-negative."""
    u, vt = u.copy(), vt.copy()
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * max(np.abs(col).max(), 1e-300))
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            vt[j] = -vt[j]
    return u, vt


def decompose_whitened(w, wt: WhiteningTransform, rank: int) -> LowRankFactors:
    """Rank-``rank`` factors minimizing the activation-space error under ``wt``."""
    w = np.asarray(w, dtype=np.float64)
    d_in, d_out = w.shape
    if wt.d != d_in:
        raise ValueError(f"whitening is {wt.d}-dimensional, weight has {d_in} input rows")
    if not 1 <= rank < min(d_in, d_out):
        raise ValueError(f"rank must satisfy 1 <= r < {min(d_in, d_out)}, got {rank}")
    seen = wt.chol.T @ w
    try:
        u, sig, vt = np.linalg.svd(seen, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"SVD did not converge: {exc}") from exc
    u, vt = _fix_signs(u, vt)
    us = u[:, :rank] * sig[:rank]
    a = scipy.linalg.solve_triangular(wt.chol.T, us, lower=False)
    b = vt[:rank].copy()
    total = float(np.sum(sig**2))
    kept = float(np.sum(sig[:rank] ** 2) / total) if total > 0 else 1.0
    return LowRankFactors(a, b, rank, (d_in, d_out), kept)


def rank_for_keep(d: int, rank_keep: float) -> int:
    """Rank whose factor pair stores ``rank_keep`` of a d x d matrix: floor(rank_keep * d / 2)."""
    if not 0 < rank_keep <= 1:
        raise ValueError("rank_keep must lie in (0, 1]")
    r = int(np.floor(rank_keep * d / 2 + 1e-9))
    if r < 1:
        raise ValueError(f"rank_keep {rank_keep} leaves rank < 1 for d={d}")
    return r


def attention_inputs(model: ModelCheckpoint, calib) -> list:
    """Per-layer normalized attention inputs, flattened to rows."""
    tokens = np.asarray(getattr(calib, "sequences", calib))
    traces, _ = trace(model, tokens)
    return [tr.attn_in.reshape(-1, tr.attn_in.shape[-1]) for tr in traces]


def apply_lowrank_qk(model: ModelCheckpoint, calib, rank_keep: float, inputs=None) -> ModelCheckpoint:
    """Replace every layer's ``w_q`` and ``w_k`` by whitened rank-r factor pairs.

    ``inputs`` may carry precomputed per-layer attention inputs.
    """
    r = rank_for_keep(model.config.d, rank_keep)
    if inputs is None:
        inputs = attention_inputs(model, calib)
    out = model
    for i, layer in enumerate(model.layers):
        wt = fit_whitening(inputs[i])
        new = {}
        for name in ("w_q", "w_k"):
            f = decompose_whitened(materialize(getattr(layer, name)), wt, r)
            new[name] = LowRank(f.a.astype(np.float32), f.b.astype(np.float32))
        out = out.replace_layer(i, **new)
    return out
