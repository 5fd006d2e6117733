"""Acceptance criteria, one test each, with their stated tolerances and time budgets.

Each test appends a ``CRITERION n: PASS|FAIL ...`` line to ``RESULTS``; the
conftest prints them after the run. ``python tests/test_acceptance.py`` runs
the same checks without pytest.
"""

import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from casp.attention import compression_error
from casp.bitalloc import alloc_oracle, allocate_bits
from casp.checkpoint import save_checkpoint
from casp.lowrank import WhiteningTransform, decompose_whitened, fit_whitening
from casp.pipeline import run_ablation, sweep_vision_ratio, toy_model
from casp.quantize import dequantize, quantize_greedy, quantize_rtn, quantize_vq

RESULTS = []


def record(n, ok, budget, started, detail):
    elapsed = time.perf_counter() - started
    ok = bool(ok) and (budget is None or elapsed < budget)
    limit = "" if budget is None else f" (< {budget:g}s)"
    RESULTS.append(f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f}s{limit}]")
    assert ok, RESULTS[-1]


def test_c1_eckart_young():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        m, n = rng.integers(2, 65, size=2)
        w = rng.standard_normal((m, n)) * rng.uniform(0.1, 10)
        r = int(rng.integers(1, min(m, n)))
        f = decompose_whitened(w, WhiteningTransform.identity(m), r)
        sig = np.linalg.svd(w, compute_uv=False)
        want = np.sqrt(np.sum(sig[r:] ** 2))
        got = np.linalg.norm(w - f.reconstruct())
        worst = max(worst, abs(got - want) / want)
    record(1, worst <= 1e-6, 5, t0, f"max relative gap {worst:.2e} over 100 matrices (tol 1e-6)")


def test_c2_first_order_bound():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst, max_dy = -np.inf, 0.0
    for _ in range(100):
        n, d = int(rng.integers(4, 33)), int(rng.integers(2, 17))
        x = rng.standard_normal((n, d))
        wq, wk = rng.standard_normal((2, d, d)) * rng.uniform(0.2, 3)
        dq, dk = rng.standard_normal((2, d, d))
        eps = 1e-4
        while True:
            rep = compression_error(x, wq, wk, wq + eps * dq, wk + eps * dk)
            if rep.delta_y_norm <= 1e-3:
                break
            eps /= 4
        worst = max(worst, rep.e - rep.bound_exact)
        max_dy = max(max_dy, rep.delta_y_norm)
    record(2, worst <= 1e-6, 10, t0, f"max(E - bound) {worst:.2e}, max ||dY|| {max_dy:.1e} (tol 1e-6)")


def test_c3_sparsity_error_monotonicity():
    t0 = time.perf_counter()
    rows = sweep_vision_ratio(toy_model(2, 1))
    rho = spearmanr([r.ratio for r in rows], [r.e for r in rows]).statistic
    deg = [r.degradation for r in rows]
    ok = rho <= -0.9 and deg[-1] < deg[0]
    es = ", ".join(f"{r.e:.3f}" for r in rows)
    record(3, ok, 60, t0, f"rho {rho:.2f} (<= -0.9), E [{es}], degradation {deg[0]:.4f} -> {deg[-1]:.4f}")


def test_c4_allocation_optimality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_gap, worst_budget = np.inf, 0.0
    for _ in range(50):
        n = int(rng.integers(1, 7))
        s = rng.uniform(0, 2, n)
        p = rng.integers(1, 6, n)
        b_avg = float(rng.choice([1.5, 2.0, 2.5, 3.0]))
        mu = float(rng.uniform(0.05, 2.0))
        plan = allocate_bits(s, p, b_avg, mu)
        grid = alloc_oracle(s, p, b_avg, mu, grid_step=0.01)
        worst_gap = min(worst_gap, plan.objective_value - grid.objective_value)
        budget = p.sum() * b_avg
        worst_budget = max(worst_budget, abs(plan.bits_cont @ p - budget) / budget)
    ok = worst_gap >= -1e-9 and worst_budget <= 1e-9
    record(4, ok, 30, t0, f"min(closed - grid) {worst_gap:.2e}, budget rel err {worst_budget:.1e}")


def test_c5_mu_limits():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    s = rng.uniform(0, 2, 6)
    # with unequal p_l the large-mu plan is b_l ~ c**p_l, not uniform
    # "large" is relative to the spread of s_l p_l
    dev = max(
        float(np.max(np.abs(allocate_bits(s, np.ones(6), 2.5, 1e6).bits_cont - 2.5))),
        float(np.max(np.abs(allocate_bits(s, np.full(6, 512), 2.5, 1e6 * np.ptp(s * 512)).bits_cont - 2.5))),
    )
    flat = allocate_bits(np.full(6, 0.7), np.full(6, 512), 2.5, 0.01)
    exact = bool(np.all(flat.bits_cont == flat.bits_cont[0]))
    record(5, dev <= 1e-3 and exact, None, t0, f"large-mu deviation {dev:.1e} (<= 1e-3), equal scores uniform {exact}")


def test_c6_quantizer_contracts():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    rtn_ok = True
    for _ in range(100):
        w = rng.standard_normal((int(rng.integers(1, 40)), int(rng.integers(1, 70)))) * rng.uniform(0.01, 100)
        qt = quantize_rtn(w, int(rng.integers(2, 9)), int(rng.choice([8, 32, 128])))
        gid = np.arange(qt.numel) // qt.group_size
        half = (qt.scales.astype(np.float64)[gid] / 2).reshape(qt.shape)
        rtn_ok &= bool(np.all(np.abs(dequantize(qt) - w) <= half))
    wins = 0
    for seed in range(100):
        r = np.random.default_rng(1000 + seed)
        mix = r.standard_normal((32, 32)) * np.geomspace(1, 0.05, 32)
        x = r.standard_normal((512, 32)) @ mix
        w = r.standard_normal((32, 32))
        err = lambda q: np.linalg.norm(x @ (w - dequantize(q))) ** 2  # noqa: E731
        wins += err(quantize_greedy(w, x, 3)) <= err(quantize_rtn(w, 3))
    atoms = rng.standard_normal((6, 4)).astype(np.float16).astype(np.float64)
    w = atoms[rng.integers(6, size=64)].reshape(16, 16)
    vq_err = float(np.max(np.abs(dequantize(quantize_vq(w, 1, 4, seed=0)) - w)))
    ok = rtn_ok and wins >= 90 and vq_err == 0
    record(6, ok, 30, t0, f"RTN half-step {rtn_ok}, greedy <= RTN {wins}/100 (>= 90), VQ error {vq_err}")


def test_c7_whitening_advantage():
    t0 = time.perf_counter()
    wins, min_cond = 0, np.inf
    for seed in range(20):
        rng = np.random.default_rng(700 + seed)
        q, _ = np.linalg.qr(rng.standard_normal((32, 32)))
        x = rng.standard_normal((1024, 32)) * np.geomspace(1, 1e-3, 32) @ q.T
        min_cond = min(min_cond, np.linalg.cond(x))
        w = rng.standard_normal((32, 32))
        f = decompose_whitened(w, fit_whitening(x), 8)
        u, sig, vt = np.linalg.svd(w)
        plain = (u[:, :8] * sig[:8]) @ vt[:8]
        wins += np.linalg.norm(x @ (w - f.reconstruct())) <= np.linalg.norm(x @ (w - plain))
    record(7, wins == 20 and min_cond >= 100, 10, t0, f"whitened <= plain {wins}/20, min cond(X) {min_cond:.0f}")


def test_c8_ablation_ordering():
    t0 = time.perf_counter()
    rep = run_ablation(toy_model(4, 1), "greedy", seed=0)
    full, rand, quant = (rep[k].ppl for k in ("full", "random_bits", "quant_only"))
    first = full <= rand * 1.01
    second = rand <= quant * 1.01
    detail = (
        f"PPL full {full:.3f} <= random {rand:.3f}: {first}; random <= quant-only {quant:.3f}: {second}"
        f"  (full <= quant-only: {full <= quant * 1.01})"
    )
    record(8, first and second, 120, t0, detail)


def test_c9_cli_reproducible(tmp_path):
    t0 = time.perf_counter()
    model = tmp_path / "toy.caspkpt"
    save_checkpoint(toy_model(4, 1), model)
    outs = []
    for run in ("a", "b"):
        ck, rp = tmp_path / f"{run}.caspkpt", tmp_path / f"{run}.jsonl"
        cmd = [sys.executable, "-m", "casp.cli", "compress", "--model", str(model), "--out", str(ck),
               "--seed", "11", "--scheme", "greedy", "--report", str(rp)]
        subprocess.run(cmd, check=True, capture_output=True)
        outs.append((ck.read_bytes(), rp.read_bytes()))
    same = outs[0] == outs[1]
    record(9, same, None, t0, f"checkpoints and reports byte-identical: {same}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
