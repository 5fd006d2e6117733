"""Per-layer bit budgets from layer importance.

Each layer gets a continuous bit width ``b_l`` maximizing

    sum_l s_l b_l p_l + mu * sum_l (-b_l log b_l)

subject to ``sum_l b_l p_l = P * B_avg``. Setting the Lagrangian gradient to
zero gives ``log b_l = (s_l - lam) p_l / mu - 1``. With equal ``p_l`` the
multiplier folds into a softmax; otherwise ``lam`` is found by a bracketed root
solve on the (monotone) budget equation. The objective is concave, so the
stationary point is the global maximum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
import scipy.optimize
import scipy.special

ORACLE_MAX_LAYERS = 6
ORACLE_MAX_UNITS = 200_000


@dataclass(frozen=True, eq=False)
class LayerImportance:
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        if s.size == 0:
            raise ValueError("no layer scores")
        if not np.all(np.isfinite(s)):
            raise ValueError("layer scores must be finite")
        if np.any(s < 0) or np.any(s > 2):
            raise ValueError("layer scores must lie in [0, 2]")
        object.__setattr__(self, "scores", s)

    @property
    def layer_count(self) -> int:
        return self.scores.size


@dataclass(frozen=True, eq=False)
class BitPlan:
    bits_cont: np.ndarray
    params: np.ndarray
    total_params: float
    target: float
    mu: float
    lambda_: float
    objective_value: float
    scores: np.ndarray
    bits_int: np.ndarray | None = None

    @property
    def average_bits(self) -> float:
        """Weighted average of the continuous plan, sum b_l p_l / P."""
        return float(self.bits_cont @ self.params / self.total_params)

    @property
    def average_bits_int(self) -> float:
        if self.bits_int is None:
            raise ValueError("plan has not been rounded")
        return float(self.bits_int @ self.params / self.total_params)


def block_influence(x_in, x_out) -> float:
    """One minus the mean cosine similarity between matching rows of a layer's input and output."""
    a = np.asarray(getattr(x_in, "x", x_in), dtype=np.float64)
    b = np.asarray(getattr(x_out, "x", x_out), dtype=np.float64)
    a = a.reshape(-1, a.shape[-1])
    b = b.reshape(-1, b.shape[-1])
    if a.shape != b.shape:
        raise ValueError(f"input rows {a.shape} and output rows {b.shape} differ")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    keep = (na > 0) & (nb > 0)
    if not keep.any():
        raise ValueError("all rows have zero norm")
    skipped = int(np.count_nonzero(~keep))
    if skipped:
        warnings.warn(f"skipped {skipped} zero-norm rows", RuntimeWarning, stacklevel=2)
    cos = np.einsum("ij,ij->i", a[keep], b[keep]) / (na[keep] * nb[keep])
    return float(1.0 - np.mean(np.clip(cos, -1.0, 1.0)))


def entropy_term(bits) -> float:
    b = np.asarray(bits, dtype=np.float64)
    return float(-np.sum(scipy.special.xlogy(b, b)))


def objective(scores, params, bits, mu: float) -> float:
    s = np.asarray(scores, dtype=np.float64)
    p = np.asarray(params, dtype=np.float64)
    b = np.asarray(bits, dtype=np.float64)
    return float(np.sum(s * b * p) + mu * entropy_term(b))


def default_mu(scores, params) -> float:
    """0.1 x the spread of ``s_l p_l``; falls back to 1 when every layer scores the same."""
    sp = np.asarray(scores, dtype=np.float64) * np.asarray(params, dtype=np.float64)
    sd = float(np.std(sp))
    return 0.1 * sd if sd > 0 else 1.0


def _check_inputs(scores, params, b_avg, mu, total_params):
    s = scores.scores if isinstance(scores, LayerImportance) else LayerImportance(scores).scores
    p = np.asarray(params, dtype=np.float64).ravel()
    if p.shape != s.shape:
        raise ValueError(f"{s.size} scores but {p.size} parameter counts")
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise ValueError("parameter counts must be positive")
    if not b_avg > 0:
        raise ValueError("b_avg must be positive")
    if not mu > 0:
        raise ValueError("mu must be positive")
    total = float(p.sum()) if total_params is None else float(total_params)
    if not total > 0:
        raise ValueError("total_params must be positive")
    return s, p, total


def _solve_lambda(s, p, mu, budget):
    """Root of log(sum_l p_l exp((s_l - lam) p_l / mu - 1)) = log(budget)."""
    log_budget = np.log(budget)

    def gap(lam):
        return scipy.special.logsumexp((s - lam) * p / mu - 1.0, b=p) - log_budget

    lo, hi = float(s.min()) - 1.0, float(s.max()) + 1.0
    for _ in range(200):
        if gap(lo) > 0:
            break
        lo -= 2.0 * (hi - lo)
    for _ in range(200):
        if gap(hi) < 0:
            break
        hi += 2.0 * (hi - lo)
    if not (gap(lo) > 0 > gap(hi)):
        raise ArithmeticError(f"could not bracket the multiplier; last bracket [{lo}, {hi}]")
    try:
        lam = scipy.optimize.brentq(gap, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    except (RuntimeError, ValueError) as exc:
        raise ArithmeticError(f"multiplier solve did not converge in [{lo}, {hi}]: {exc}") from exc
    return float(lam)


def allocate_bits(scores, params, b_avg: float, mu: float | None = None, total_params=None) -> BitPlan:
    """Closed-form continuous bit widths.

    ``total_params`` is the ``P`` of the budget ``sum b_l p_l = P * b_avg`` and
    defaults to ``sum p_l``. Passing a larger ``P`` (e.g. the parameter count
    before low-rank factoring) lets the saved parameters fund extra bits.
    """
    if mu is None:
        mu = default_mu(getattr(scores, "scores", scores), params)
    s, p, total = _check_inputs(scores, params, b_avg, mu, total_params)
    budget = total * b_avg
    if np.all(p == p[0]):
        log_b = np.log(budget / p) + scipy.special.log_softmax(s * p / mu)
        b = np.exp(log_b)
        lam = float(np.mean(s - mu * (log_b + 1.0) / p))
    else:
        lam = _solve_lambda(s, p, mu, budget)
        b = np.exp((s - lam) * p / mu - 1.0)
    return BitPlan(b, p, total, float(b_avg), float(mu), lam, objective(s, p, b, mu), s)


def round_bits(plan: BitPlan, allowed) -> BitPlan:
    """Integer widths: the top-k layers by continuous width get the next allowed width up.

    The base width is the largest allowed value the budget can pay for on
    every layer; k is the largest prefix (continuous width descending, layer
    index ascending on ties) that still fits the budget.
    """
    levels = sorted({int(a) for a in allowed})
    if not levels:
        raise ValueError("allowed bit set is empty")
    p = plan.params
    budget = Fraction(plan.total_params) * Fraction(plan.target)
    total_p = sum(Fraction(x) for x in p)
    if levels[0] * total_p > budget:
        raise ValueError(f"infeasible: {levels[0]} bits on every layer exceeds B_avg={plan.target}")
    cont = plan.bits_cont
    as_int = np.rint(cont)
    if np.allclose(cont, as_int, rtol=0, atol=1e-9) and set(as_int.astype(int)) <= set(levels):
        if sum(int(b) * Fraction(x) for b, x in zip(as_int, p)) <= budget:
            return replace(plan, bits_int=as_int.astype(np.int64))
    base = max(a for a in levels if a * total_p <= budget)
    higher = [a for a in levels if a > base]
    bits = np.full(p.size, base, dtype=np.int64)
    if higher:
        up = higher[0]
        order = sorted(range(p.size), key=lambda i: (-cont[i], i))
        spent = base * total_p
        for i in order:
            extra = (up - base) * Fraction(p[i])
            if spent + extra > budget:
                break
            spent += extra
            bits[i] = up
    return replace(plan, bits_int=bits)


def alloc_oracle(scores, params, b_avg: float, mu: float, grid_step: float = 0.01, total_params=None) -> BitPlan:
    """Exact maximizer of the objective over the budget-feasible grid (tests only).

    Widths are multiples of ``grid_step``; with integer ``p_l`` the budget is
    counted in units of ``grid_step`` and an exact max-plus dynamic program
    replaces enumeration of the grid.
    """
    s, p, total = _check_inputs(scores, params, b_avg, mu, total_params)
    if s.size > ORACLE_MAX_LAYERS:
        raise ValueError(f"oracle supports at most {ORACLE_MAX_LAYERS} layers")
    if not np.allclose(p, np.rint(p)):
        raise ValueError("oracle needs integer parameter counts")
    pi = np.rint(p).astype(np.int64)
    units_f = total * b_avg / grid_step
    units = int(round(units_f))
    if abs(units - units_f) > 1e-6 * max(1.0, units_f):
        raise ValueError("budget is not a whole number of grid steps")
    if units > ORACLE_MAX_UNITS:
        raise ValueError("budget grid too large for the oracle")

    neg = -np.inf
    best = np.full(units + 1, neg)
    best[0] = 0.0
    choices = []
    for sl, pl in zip(s, pi):
        kmax = units // pl
        k = np.arange(1, kmax + 1)
        b = k * grid_step
        gain = sl * b * pl - mu * b * np.log(b)
        new = np.full(units + 1, neg)
        pick = np.zeros(units + 1, dtype=np.int64)
        for kk, g in zip(k, gain):
            shift = kk * pl
            cand = np.full(units + 1, neg)
            cand[shift:] = best[: units + 1 - shift] + g
            better = cand > new
            new[better] = cand[better]
            pick[better] = kk
        best = new
        choices.append(pick)
    if not np.isfinite(best[units]):
        raise ValueError("no grid point meets the budget exactly")
    ks = np.zeros(s.size, dtype=np.int64)
    u = units
    for layer in range(s.size - 1, -1, -1):
        ks[layer] = choices[layer][u]
        u -= ks[layer] * pi[layer]
    b = ks * grid_step
    return BitPlan(b, p, total, float(b_avg), float(mu), float("nan"), objective(s, p, b, mu), s)
