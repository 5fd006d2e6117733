import itertools

import numpy as np
import pytest

from casp.bitalloc import (
    BitPlan,
    LayerImportance,
    alloc_oracle,
    allocate_bits,
    block_influence,
    default_mu,
    objective,
    round_bits,
)


def test_block_influence_extremes():
    x = np.random.default_rng(0).standard_normal((10, 4))
    assert block_influence(x, x) == pytest.approx(0, abs=1e-15)
    assert block_influence(x, -x) == pytest.approx(2)


def test_block_influence_matches_scalar_loop():
    rng = np.random.default_rng(41)
    a, b = rng.standard_normal((64, 8)), rng.standard_normal((64, 8))
    cos = []
    for i in range(64):
        dot = sum(a[i, j] * b[i, j] for j in range(8))
        na = sum(v * v for v in a[i]) ** 0.5
        nb = sum(v * v for v in b[i]) ** 0.5
        cos.append(dot / (na * nb))
    assert block_influence(a, b) == pytest.approx(1 - sum(cos) / 64, abs=1e-7)


def test_block_influence_zero_rows():
    a = np.ones((4, 3))
    b = np.ones((4, 3))
    a[1] = 0
    with pytest.warns(RuntimeWarning, match="skipped 1"):
        assert block_influence(a, b) == pytest.approx(0)
    with pytest.raises(ValueError, match="zero norm"):
        block_influence(np.zeros((3, 3)), b[:3])


def test_importance_range():
    with pytest.raises(ValueError):
        LayerImportance([0.1, 2.5])
    assert LayerImportance([0.1, 0.2]).layer_count == 2


def test_equal_scores_give_uniform_plan():
    for mu in (1e-3, 1.0, 1e3):
        plan = allocate_bits([0.3] * 5, [7] * 5, 2.5, mu)
        np.testing.assert_allclose(plan.bits_cont, 2.5, rtol=1e-12)


def test_large_mu_limit():
    plan = allocate_bits([0.1, 0.9, 0.4, 0.2], [1] * 4, 2.0, 1e6)
    assert np.max(np.abs(plan.bits_cont - 2.0)) <= 1e-3


def test_small_mu_limit_concentrates_on_top_layer():
    s, p = np.array([0.1, 0.5, 0.4]), np.array([10.0] * 3)
    mu = 1e-4 * np.ptp(s * p)
    plan = allocate_bits(s, p, 2.0, mu)
    assert plan.bits_cont[1] == pytest.approx(p.sum() * 2.0 / p[1], rel=1e-6)


def test_three_layer_example_against_grid():
    s, p = [0.1, 0.5, 0.4], [1, 1, 1]
    plan = allocate_bits(s, p, 2.0, 0.1)
    grid = alloc_oracle(s, p, 2.0, 0.1, grid_step=0.01)
    assert np.max(np.abs(plan.bits_cont - grid.bits_cont)) <= 0.01 + 1e-12
    assert plan.objective_value >= grid.objective_value - 1e-9


def test_oracle_matches_plain_enumeration():
    # tiny instance: enumerate every grid point directly
    s, p, b_avg, mu, step = [0.2, 0.7, 0.5], [1, 2, 1], 1.0, 0.3, 0.25
    units = int(round(sum(p) * b_avg / step))
    best = -np.inf
    for ks in itertools.product(range(1, units + 1), repeat=3):
        if sum(k * q for k, q in zip(ks, p)) != units:
            continue
        best = max(best, objective(s, p, np.array(ks) * step, mu))
    assert alloc_oracle(s, p, b_avg, mu, step).objective_value == pytest.approx(best, abs=1e-12)


def test_unequal_params_budget_and_optimality():
    rng = np.random.default_rng(8)
    for _ in range(10):
        n = int(rng.integers(2, 6))
        s, p = rng.uniform(0, 2, n), rng.integers(1, 5, n)
        mu = float(rng.uniform(0.1, 2))
        plan = allocate_bits(s, p, 2.5, mu)
        assert plan.average_bits == pytest.approx(2.5, rel=1e-9)
        assert plan.objective_value >= alloc_oracle(s, p, 2.5, mu).objective_value - 1e-9
        assert np.all(plan.bits_cont > 0)


def test_total_params_override():
    plan = allocate_bits([0.2, 0.4], [3, 3], 2.0, 0.5, total_params=8)
    assert float(plan.bits_cont @ plan.params) == pytest.approx(16)


def test_monotone_and_shift_invariant():
    s = np.array([0.3, 0.1, 0.6, 0.45])
    a = allocate_bits(s, [5] * 4, 3.0, 0.4)
    b = allocate_bits(s + 0.7, [5] * 4, 3.0, 0.4)
    np.testing.assert_allclose(a.bits_cont, b.bits_cont, rtol=1e-9)
    order = np.argsort(s)
    assert np.all(np.diff(a.bits_cont[order]) >= 0)


def test_single_layer_pinned():
    assert alloc_oracle([0.4], [3], 2.0, 0.2).bits_cont[0] == pytest.approx(2.0)
    assert allocate_bits([0.4], [3], 2.0, 0.2).bits_cont[0] == pytest.approx(2.0)


def test_allocation_errors():
    with pytest.raises(ValueError, match="mu"):
        allocate_bits([0.1, 0.2], [1, 1], 2.0, 0.0)
    with pytest.raises(ValueError):
        allocate_bits([0.1, 0.2], [1, 0], 2.0, 1.0)
    with pytest.raises(ValueError):
        alloc_oracle([0.1] * 7, [1] * 7, 2.0, 1.0)


def test_default_mu():
    assert default_mu([0.1, 0.3], [10, 10]) == pytest.approx(0.1 * np.std([1.0, 3.0]))
    assert default_mu([0.2, 0.2], [1, 1]) == 1.0


def plan_of(bits, params=None, target=2.0):
    bits = np.asarray(bits, dtype=float)
    params = np.ones_like(bits) if params is None else np.asarray(params, dtype=float)
    return BitPlan(bits, params, float(params.sum()), target, 1.0, 0.0, 0.0, np.zeros_like(bits))


def best_by_enumeration(scores, params, budget, levels=(2, 3)):
    best, arg = -np.inf, None
    for combo in itertools.product(levels, repeat=len(scores)):
        if np.dot(combo, params) > budget + 1e-12:
            continue
        val = float(np.dot(np.asarray(scores) * combo, params))
        if val > best:
            best, arg = val, combo
    return arg


def test_round_bits_examples():
    assert list(round_bits(plan_of([3, 2, 3, 2], target=2.5), {2, 3}).bits_int) == [3, 2, 3, 2]
    assert list(round_bits(plan_of([2.3] * 10), {2, 3}).bits_int) == [2] * 10
    ex = round_bits(plan_of([2.6, 2.4, 1.6, 1.4]), {2, 3}).bits_int
    s = [0.9, 0.7, 0.2, 0.1]
    assert tuple(ex) == best_by_enumeration(s, [1] * 4, 8) == (2, 2, 2, 2)
    with pytest.raises(ValueError, match="infeasible"):
        round_bits(plan_of([2.0, 2.0], target=1.5), {2, 3})


def test_round_bits_matches_enumeration_on_equal_params():
    rng = np.random.default_rng(0)
    for _ in range(40):
        n = int(rng.integers(1, 9))
        s = rng.uniform(0, 2, n)
        target = float(rng.choice([2.0, 2.25, 2.5, 2.75]))
        plan = allocate_bits(s, [4] * n, target, 0.2)
        got = round_bits(plan, {2, 3})
        want = best_by_enumeration(s, [4] * n, 4 * n * target)
        assert np.dot(s, got.bits_int) == pytest.approx(np.dot(s, want))
        slack = 1 / n
        assert abs(got.average_bits_int - target) <= 1 + slack


def test_round_bits_tie_break_by_index():
    got = round_bits(plan_of([2.5, 2.5, 2.5, 2.5], target=2.5), {2, 3}).bits_int
    assert list(got) == [3, 3, 2, 2]
