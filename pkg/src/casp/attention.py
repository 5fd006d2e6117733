"""Attention maps, their sparsity, and how low-rank Q/K perturbations move them.

For logits ``Y = X Wq (X Wk)^T / sqrt(d)`` and a perturbation ``dY``, each row of
``softmax(Y + dY) - softmax(Y)`` is to first order ``J_i dY_i`` with the softmax
Jacobian ``J_i = diag(z_i) - z_i z_i^T``. Summing ``||J_i|| ||dY_i||`` bounds the
first-order error; concentrated rows have a near-zero Jacobian, which is why
sparse maps tolerate larger weight perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelCheckpoint, causal_mask, materialize, softmax, trace


@dataclass(frozen=True, eq=False)
class AttentionMap:
    s: np.ndarray  # N x N, row-stochastic
    y: np.ndarray  # N x N logits, -inf where masked
    n_tokens: int
    d: int


@dataclass(frozen=True)
class SparsityStats:
    eta: float
    sparsity: float  # 1 - density
    density: float  # active_count / N^2
    active_count: int


@dataclass(frozen=True, eq=False)
class ErrorReport:
    e: float  # ||S' - S||_F
    e_rows: float  # sum_i ||S'_i - S_i||
    delta_y_norm: float
    bound_exact: float  # sum_i ||J_i||_F ||dY_i||
    bound_density: float  # (1 - 1/(N D))^2 ||dY||_F
    first_order: float  # ||[J_i dY_i]_i||_F
    taylor_residual_estimate: float  # e - first_order
    stats: SparsityStats
    jacobian_norms: np.ndarray
    delta_y: np.ndarray


@dataclass(frozen=True)
class BoundVerdict:
    satisfied_exact: bool
    satisfied_density: bool
    margin: float  # bound_exact - e
    margin_density: float  # bound_density + |eps| - e

    @property
    def satisfied_paper(self) -> bool:  # name used by external callers
        return self.satisfied_density


def _logits(x, w_q, w_k, d, causal):
    x = np.asarray(getattr(x, "x", x), dtype=np.float64)
    w_q = np.asarray(w_q, dtype=np.float64)
    w_k = np.asarray(w_k, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("x must be an N x d matrix with N >= 1")
    if w_q.shape[0] != x.shape[1] or w_k.shape != w_q.shape:
        raise ValueError(f"weights {w_q.shape}/{w_k.shape} do not conform to x {x.shape}")
    for arr in (x, w_q, w_k):
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite input")
    if d is None:
        d = w_q.shape[1]
    y = (x @ w_q) @ (x @ w_k).T / np.sqrt(d)
    if causal:
        y = np.where(causal_mask(x.shape[0]), -np.inf, y)
    return y, d


def attention_map(x, w_q, w_k, d: int | None = None, causal: bool = False) -> AttentionMap:
    """Row-softmax of the scaled query-key logits (max-subtracted)."""
    y, d = _logits(x, w_q, w_k, d, causal)
    return AttentionMap(softmax(y), y, y.shape[0], int(d))


def default_eta(n_tokens: int) -> float:
    return 0.01 / n_tokens


def sparsity_stats(amap: AttentionMap, eta: float | None = None) -> SparsityStats:
    """Count map entries strictly above ``eta`` (default 0.01 / N)."""
    if eta is None:
        eta = default_eta(amap.n_tokens)
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    active = int(np.count_nonzero(amap.s > eta))
    density = active / amap.s.size
    return SparsityStats(float(eta), 1.0 - density, density, active)


def softmax_jacobian_norms(amap: AttentionMap) -> np.ndarray:
    """Frobenius norm of ``diag(z) - z z^T`` for every row ``z`` of the map."""
    out = np.empty(amap.n_tokens)
    for i, z in enumerate(amap.s):
        out[i] = np.linalg.norm(np.diag(z) - np.outer(z, z))
    return out


def density_jacobian_factor(stats: SparsityStats, n_tokens: int) -> float:
    """Density heuristic ``(1 - 1/(N D))^2`` standing in for ``||J||``."""
    nd = n_tokens * stats.density
    if nd <= 0:
        return 0.0
    return (1.0 - 1.0 / nd) ** 2


def compression_error(
    x, w_q, w_k, w_q2, w_k2, d: int | None = None, causal: bool = False, eta: float | None = None
) -> ErrorReport:
    """Map error of replacing (w_q, w_k) by (w_q2, w_k2) on the same inputs, with both bounds."""
    if np.shape(w_q2) != np.shape(w_q) or np.shape(w_k2) != np.shape(w_k):
        raise ValueError("shape mismatch between original and compressed weights")
    base = attention_map(x, w_q, w_k, d, causal)
    comp = attention_map(x, w_q2, w_k2, d, causal)
    finite = np.isfinite(base.y)
    dy = np.where(finite, comp.y - np.where(finite, base.y, 0.0), 0.0)
    diff = comp.s - base.s
    stats = sparsity_stats(base, eta)
    jn = softmax_jacobian_norms(base)
    dy_rows = np.linalg.norm(dy, axis=1)
    lin = np.empty_like(dy)
    for i, z in enumerate(base.s):
        lin[i] = z * dy[i] - z * (z @ dy[i])  # (diag(z) - z z^T) dy_i
    e = float(np.linalg.norm(diff))
    first = float(np.linalg.norm(lin))
    dyn = float(np.linalg.norm(dy))
    return ErrorReport(
        e=e,
        e_rows=float(np.sum(np.linalg.norm(diff, axis=1))),
        delta_y_norm=dyn,
        bound_exact=float(np.sum(jn * dy_rows)),
        bound_density=density_jacobian_factor(stats, base.n_tokens) * dyn,
        first_order=first,
        taylor_residual_estimate=e - first,
        stats=stats,
        jacobian_norms=jn,
        delta_y=dy,
    )


def bound_check(report: ErrorReport, stats: SparsityStats, tol: float = 1e-6) -> BoundVerdict:
    """Whether E sits under the exact first-order bound and under the density heuristic."""
    n = report.delta_y.shape[0]
    heuristic = density_jacobian_factor(stats, n) * report.delta_y_norm
    eps = abs(report.taylor_residual_estimate)
    margin = report.bound_exact - report.e
    margin_density = heuristic + eps - report.e
    return BoundVerdict(margin >= -tol, margin_density >= -tol, margin, margin_density)


theorem1_bound_check = bound_check  # name used by external callers


# --------------------------------------------------------------------------- model level


@dataclass(frozen=True)
class LayerAttentionSummary:
    layer: int
    n_tokens: int
    sparsity: float
    density: float
    e: float
    e_rows: float
    delta_y_norm: float
    bound_exact: float
    bound_density: float
    taylor_residual_estimate: float


def _head_slices(d, n_heads):
    dh = d // n_heads
    return [slice(h * dh, (h + 1) * dh) for h in range(n_heads)], dh


def analyze_layers(
    model: ModelCheckpoint, compressed: ModelCheckpoint, tokens, eta: float | None = None
) -> list:
    """Per-layer map error of ``compressed``'s Q/K against ``model``'s, on ``model``'s inputs.

    Quantities are averaged over sequences and heads; maps are causal.
    """
    tokens = np.asarray(getattr(tokens, "sequences", tokens))
    traces, _ = trace(model, tokens)
    slices, dh = _head_slices(model.config.d, model.config.n_heads)
    out = []
    for li, tr in enumerate(traces):
        wq, wk = materialize(model.layers[li].w_q), materialize(model.layers[li].w_k)
        cq, ck = materialize(compressed.layers[li].w_q), materialize(compressed.layers[li].w_k)
        rows = []
        for x in tr.attn_in:
            for sl in slices:
                rep = compression_error(
                    x, wq[:, sl], wk[:, sl], cq[:, sl], ck[:, sl], d=dh, causal=True, eta=eta
                )
                rows.append(
                    (
                        rep.stats.sparsity,
                        rep.stats.density,
                        rep.e,
                        rep.e_rows,
                        rep.delta_y_norm,
                        rep.bound_exact,
                        rep.bound_density,
                        rep.taylor_residual_estimate,
                    )
                )
        m = np.mean(np.array(rows), axis=0)
        out.append(LayerAttentionSummary(li, tr.attn_in.shape[1], *map(float, m)))
    return out
