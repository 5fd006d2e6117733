import numpy as np
import pytest

from casp.lowrank import (
    CovarianceAccumulator,
    WhiteningError,
    WhiteningTransform,
    apply_lowrank_qk,
    decompose_whitened,
    fit_whitening,
    rank_for_keep,
)
from casp.model import LowRank, TransformerConfig, init_model, materialize


def ill_conditioned(seed, n=400, d=16, cond=1e3):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return rng.standard_normal((n, d)) * np.geomspace(1, 1 / cond, d) @ q.T


def test_accumulator_merge_equals_batch():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((30, 5)), rng.standard_normal((20, 5))
    merged = CovarianceAccumulator(5).add(a).merge(CovarianceAccumulator(5).add(b))
    whole = np.vstack([a, b])
    np.testing.assert_allclose(merged.covariance(), whole.T @ whole / 50, atol=1e-14)
    with pytest.raises(ValueError):
        CovarianceAccumulator(5).covariance()


def test_whitening_identity_holds():
    x = ill_conditioned(1)
    wt = fit_whitening(x)
    cov = wt.cov + wt.damping * np.eye(16)
    assert np.linalg.norm(wt.white @ cov @ wt.white.T - np.eye(16)) <= 1e-4
    assert np.allclose(wt.chol, np.tril(wt.chol))
    np.testing.assert_allclose(wt.cov, wt.cov.T, atol=1e-8)


def test_rank_deficient_covariance_takes_damping():
    x = ill_conditioned(2)[:, :8] @ np.random.default_rng(0).standard_normal((8, 16))
    wt = fit_whitening(x)
    assert wt.damping > 0


def test_explicit_damping_used_alone():
    x = np.zeros((10, 4))
    x[:, 0] = 1.0
    with pytest.raises(WhiteningError):
        fit_whitening(x, damping=0.0)
    assert fit_whitening(x, damping=0.5).damping == 0.5


def test_identity_whitening_is_truncated_svd():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((20, 12))
    f = decompose_whitened(w, WhiteningTransform.identity(20), 5)
    sig = np.linalg.svd(w, compute_uv=False)
    assert np.linalg.norm(w - f.reconstruct()) == pytest.approx(np.sqrt(np.sum(sig[5:] ** 2)), rel=1e-9)
    assert f.param_count == 5 * 32
    assert f.kept_energy == pytest.approx(np.sum(sig[:5] ** 2) / np.sum(sig**2))


def test_whitened_factors_beat_random_competitors():
    x = ill_conditioned(4)
    w = np.random.default_rng(5).standard_normal((16, 16))
    f = decompose_whitened(w, fit_whitening(x), 4)
    best = np.linalg.norm(x @ (w - f.reconstruct()))
    rng = np.random.default_rng(6)
    for _ in range(50):
        a, b = rng.standard_normal((16, 4)), rng.standard_normal((4, 16))
        assert best <= np.linalg.norm(x @ (w - a @ b))
    # and the plain SVD truncation of the same rank
    u, s, vt = np.linalg.svd(w)
    assert best <= np.linalg.norm(x @ (w - (u[:, :4] * s[:4]) @ vt[:4]))


def test_sign_convention_is_deterministic():
    w = np.random.default_rng(7).standard_normal((10, 10))
    f = decompose_whitened(w, WhiteningTransform.identity(10), 3)
    g = decompose_whitened(-(-w), WhiteningTransform.identity(10), 3)
    np.testing.assert_array_equal(f.a, g.a)
    for col in f.a.T:
        nz = col[np.abs(col) > 1e-12]
        assert nz[0] >= 0


def test_rank_bounds():
    w = np.ones((6, 6))
    with pytest.raises(ValueError):
        decompose_whitened(w, WhiteningTransform.identity(6), 6)
    with pytest.raises(ValueError):
        decompose_whitened(w, WhiteningTransform.identity(5), 2)


def test_rank_for_keep():
    assert rank_for_keep(32, 0.25) == 4
    assert rank_for_keep(32, 0.5) == 8
    assert rank_for_keep(32, 1.0) == 16
    with pytest.raises(ValueError):
        rank_for_keep(4, 0.1)
    with pytest.raises(ValueError):
        rank_for_keep(32, 0)


def test_apply_lowrank_replaces_only_q_and_k():
    cfg = TransformerConfig(d=16, n_layers=2, vocab_size=64, max_seq_len=16)
    model = init_model(cfg, seed=1)
    tok = np.random.default_rng(0).integers(64, size=(4, 12))
    low = apply_lowrank_qk(model, tok, 0.25)
    for a, b in zip(model.layers, low.layers):
        assert isinstance(b.w_q, LowRank) and isinstance(b.w_k, LowRank)
        assert b.w_q.rank == 2
        np.testing.assert_array_equal(a.w_v, b.w_v)
    assert low.layers[0].param_count() == model.layers[0].param_count() - 2 * (256 - 64)
    assert np.all(np.isfinite(materialize(low.layers[1].w_k)))
