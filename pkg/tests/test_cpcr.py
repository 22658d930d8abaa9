import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from calibrated_pcr import CpcrConfig, GlmFamily, SplitPlan, cpcr_fit, predict, split
from calibrated_pcr.errors import DimensionError, FoldError, InputError, ParameterError
from calibrated_pcr.synthgen import exact_risk, make_spiked_covariance, sample_design, sample_gamma_star

from conftest import random_orthonormal


def spiked_data(seed, p=30, n=40, r=3):
    rng = np.random.default_rng(seed)
    U = random_orthonormal(rng, p, r)
    X = U @ (3 * rng.standard_normal((r, n))) + rng.standard_normal((p, n))
    y = X.T @ rng.standard_normal(p) + 0.5 * rng.standard_normal(n)
    return X, y, U


# -- split -------------------------------------------------------------------------------------------

def test_split_four_samples():
    plan = split(4, seed=0)
    assert len(plan.fold1_indices) == len(plan.fold2_indices) == 2
    assert sorted(np.concatenate(plan.folds)) == [0, 1, 2, 3]


def test_split_odd_gives_fold_one_the_extra_sample():
    plan = split(101, seed=3)
    assert (len(plan.fold1_indices), len(plan.fold2_indices)) == (51, 50)


def test_split_deterministic_and_guarded():
    a, b = split(30, seed=9), split(30, seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a.folds, b.folds))
    with pytest.raises(InputError):
        split(3)


@given(n=st.integers(4, 500), seed=st.integers(0, 2**32 - 1))
def test_split_is_a_balanced_partition(n, seed):
    f1, f2 = split(n, seed).folds
    assert len(f1) - len(f2) == n % 2
    assert np.array_equal(np.sort(np.concatenate([f1, f2])), np.arange(n))


# -- fitting ---------------------------------------------------------------------------------------------

def manual_cpcr(X, y, U, lam, plan):
    """Independent pipeline: lstsq on the projected design, then augmented lstsq for calibration."""
    out = []
    for fit_idx, cal_idx in (plan.folds, plan.folds[::-1]):
        Z = U.T @ X[:, fit_idx]
        zeta, *_ = np.linalg.lstsq(Z.T, y[fit_idx], rcond=None)
        g0 = U @ zeta
        Xc = X[:, cal_idx]
        p = X.shape[0]
        A = np.vstack([Xc.T, np.sqrt(lam) * np.eye(p)])
        b = np.concatenate([y[cal_idx], np.sqrt(lam) * g0])
        out.append(np.linalg.lstsq(A, b, rcond=None)[0])
    return 0.5 * (out[0] + out[1])


def test_matches_manual_pipeline():
    X, y, U = spiked_data(1)
    plan = split(40, seed=2)
    cfg = CpcrConfig(r=3, lam=2.5, subspace_source="oracle", basis=U)
    got = cpcr_fit(X, y, cfg, plan).gamma_cpcr
    assert np.allclose(got, manual_cpcr(X, y, U, 2.5, plan), atol=1e-9)


def test_infinite_penalty_is_averaged_pcr():
    X, y, U = spiked_data(2)
    fit = cpcr_fit(X, y, CpcrConfig(r=3, lam=1e12, subspace_source="oracle", basis=U, seed=4))
    avg = 0.5 * (fit.folds[0].gamma_init + fit.folds[1].gamma_init)
    assert np.allclose(fit.gamma_cpcr, avg, rtol=1e-4, atol=1e-8)


def test_vanishing_penalty_approaches_fold_ols():
    rng = np.random.default_rng(3)
    X, y = rng.standard_normal((5, 60)), rng.standard_normal(60)
    plan = split(60, seed=1)
    fit = cpcr_fit(X, y, CpcrConfig(r=2, lam=1e-10, seed=1), plan)
    for record, idx in zip(fit.folds, plan.folds[::-1]):
        ols = np.linalg.lstsq(X[:, idx].T, y[idx], rcond=None)[0]
        assert np.allclose(record.gamma_calib, ols, atol=1e-7)


def test_noiseless_aligned_signal_has_small_risk():
    cov = make_spiked_covariance(200, 5, {"uniform": [2, 4]}, {"uniform": [1, 3]}, seed=0)
    truth = sample_gamma_star(cov, 1.0, seed=1, sigma2=0.0)
    X = sample_design(cov, 160, seed=2)
    y = X.T @ truth.gamma_star
    fit = cpcr_fit(X, y, CpcrConfig(r=5, lam=1.0, subspace_source="oracle", basis=cov.U, seed=3))
    scale = exact_risk(np.zeros(200), truth.gamma_star, cov)
    assert exact_risk(fit.gamma_cpcr, truth.gamma_star, cov) < 1e-2 * scale


def test_swapping_folds_is_bitwise_identical():
    X, y, U = spiked_data(5)
    plan = split(40, seed=8)
    cfg = CpcrConfig(r=3, lam=0.7, subspace_source="oracle", basis=U)
    a = cpcr_fit(X, y, cfg, plan).gamma_cpcr
    b = cpcr_fit(X, y, cfg, plan.swapped()).gamma_cpcr
    assert np.array_equal(a, b)


@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-2, 2), b=st.floats(-2, 2))
def test_affine_in_response(seed, a, b):
    X, y1, U = spiked_data(seed % 1000)
    y2 = np.random.default_rng(seed).standard_normal(40)
    plan = split(40, seed=seed)
    cfg = CpcrConfig(r=3, lam=1.3, subspace_source="oracle", basis=U)
    fit = lambda y: cpcr_fit(X, y, cfg, plan).gamma_cpcr  # noqa: E731
    lhs = fit(a * y1 + b * y2)
    rhs = a * fit(y1) + b * fit(y2) + (1 - a - b) * fit(np.zeros(40))
    assert np.max(np.abs(lhs - rhs)) <= 1e-8 * max(1.0, np.max(np.abs(lhs)))


@given(seed=st.integers(0, 2**32 - 1))
def test_estimate_lies_in_spanning_set(seed):
    rng = np.random.default_rng(seed)
    X, y = rng.standard_normal((60, 16)), rng.standard_normal(16)
    plan = split(16, seed=seed)
    fit = cpcr_fit(X, y, CpcrConfig(r=2, lam=0.9), plan)
    S = np.hstack([fit.folds[0].basis.columns, fit.folds[1].basis.columns, X])
    Q, s, _ = np.linalg.svd(S, full_matrices=False)
    Q = Q[:, s > 1e-10 * s[0]]
    g = fit.gamma_cpcr
    assert np.linalg.norm(g - Q @ (Q.T @ g)) < 1e-8 * max(1.0, np.linalg.norm(g))


def test_pooled_unlabeled_uses_supplied_features():
    X, y, U = spiked_data(6)
    pool = U @ np.random.default_rng(0).standard_normal((3, 200))
    fit = cpcr_fit(X, y, CpcrConfig(r=3, lam=1.0, subspace_source="pooled_unlabeled", unlabeled=pool))
    B = fit.folds[0].basis.columns
    assert fit.folds[1].basis is fit.folds[0].basis
    assert np.allclose(B @ B.T, U @ U.T, atol=1e-10)


def test_per_fold_rank_too_large():
    X, y, _ = spiked_data(7, p=30, n=10)
    with pytest.raises(DimensionError):
        cpcr_fit(X, y, CpcrConfig(r=6, lam=1.0))


def test_fold_errors_name_the_fold():
    X, y, U = spiked_data(8)
    y = np.where(y > 0, 1, 0)
    y[split(40, seed=0).fold1_indices[0]] = 3
    cfg = CpcrConfig(r=3, lam=1.0, family=GlmFamily.bernoulli(), subspace_source="oracle", basis=U, seed=0)
    with pytest.raises(FoldError) as info:
        cpcr_fit(X, y, cfg)
    assert info.value.fold == 1
    assert isinstance(info.value.cause, InputError)


def test_config_validation():
    with pytest.raises(ParameterError):
        CpcrConfig(r=0, lam=1.0)
    with pytest.raises(ParameterError):
        CpcrConfig(r=1, lam=0.0)
    with pytest.raises(ParameterError):
        CpcrConfig(r=1, lam=1.0, subspace_source="oracle")


def test_classification_fit_separates_clusters():
    rng = np.random.default_rng(10)
    labels = rng.integers(0, 3, 120)
    means = 4 * np.eye(20)[:, :3]
    X = means[:, labels] + rng.standard_normal((20, 120))
    fam = GlmFamily.multinomial(3)
    fit = cpcr_fit(X, labels, CpcrConfig(r=3, lam=1.0, family=fam, seed=1))
    assert fit.gamma_cpcr.shape == (20, 3)
    assert np.mean(fit.predict(X) == labels) > 0.95


# -- predict ---------------------------------------------------------------------------------------------

def test_predict_examples():
    X0 = np.vstack([np.array([0.5, -1.0, 2.0]), np.ones((2, 3))])
    assert np.array_equal(predict(np.zeros(3), X0), np.zeros(3))
    assert np.allclose(predict(np.eye(3)[0], X0), [0.5, -1.0, 2.0])
    assert list(predict(np.array([1.0]), np.array([[-3.0, 3.0]]), GlmFamily.bernoulli())) == [0, 1]
    with pytest.raises(DimensionError):
        predict(np.zeros(2), X0)


def test_split_plan_swap_roundtrip():
    plan = SplitPlan(np.array([0, 1]), np.array([2, 3]))
    assert np.array_equal(plan.swapped().swapped().fold1_indices, plan.fold1_indices)
