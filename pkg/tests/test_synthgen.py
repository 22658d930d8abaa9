import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from calibrated_pcr import GlmFamily
from calibrated_pcr.decomposition import RiskDecomposition
from calibrated_pcr.errors import AggregateError, InputError, ParameterError, UnsupportedFamilyError
from calibrated_pcr.synthgen import (
    EigenSpec,
    Scenario,
    cpcr_estimator,
    draw_replicate,
    empirical_bias_variance,
    exact_risk,
    make_spiked_covariance,
    matrix_sqrt,
    monte_carlo_risk,
    monte_carlo_risks,
    pcr_estimator,
    prior_weight,
    sample_design,
    sample_gamma_star,
    sample_response,
)


def test_spectra_in_range_and_blocks_orthogonal():
    cov = make_spiked_covariance(40, 5, {"uniform": [2, 4]}, {"uniform": [1, 3]}, seed=0)
    assert np.all((cov.sigma_s >= 2) & (cov.sigma_s <= 4))
    assert np.all((cov.sigma_c >= 1) & (cov.sigma_c <= 3))
    assert np.max(np.abs(cov.U.columns.T @ cov.V.columns)) < 1e-12


def test_zero_background_has_rank_r():
    cov = make_spiked_covariance(10, 3, {"uniform": [2, 4]}, 0.0, seed=1)
    assert np.linalg.matrix_rank(cov.matrix, tol=1e-10) == 3


def test_eigenvalues_are_union_of_blocks():
    cov = make_spiked_covariance(6, 2, {"uniform": [2, 4]}, {"uniform": [1, 3]}, seed=2)
    ref = np.sort(np.concatenate([cov.sigma_s, cov.sigma_c]))
    assert np.allclose(np.linalg.eigvalsh(cov.matrix), ref, atol=1e-10)


def test_empty_spectrum_rejected():
    with pytest.raises(InputError):
        EigenSpec.parse([]).sample(3, np.random.default_rng(0))


def test_matrix_sqrt_clips_roundoff_and_rejects_negative():
    Q = np.linalg.qr(np.random.default_rng(3).standard_normal((4, 4)))[0]
    S = Q @ np.diag([2.0, 1.0, 0.0, -1e-15]) @ Q.T
    R = matrix_sqrt(S)
    assert np.allclose(R @ R, S, atol=1e-12)
    with pytest.raises(InputError):
        matrix_sqrt(np.diag([1.0, -0.5]))


def test_kappa_one_lies_in_spike_subspace():
    cov = make_spiked_covariance(30, 4, 3.0, 1.0, seed=4)
    truth = sample_gamma_star(cov, 1.0, seed=5)
    assert truth.realized_kappa == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ParameterError):
        sample_gamma_star(cov, 0.0)
    with pytest.raises(ParameterError):
        sample_gamma_star(cov, 1.2)


@pytest.mark.parametrize("convention", ["prior", "expected_ratio"])
def test_prior_trace_identities(convention):
    # E||P_U g||^2 = w r and E||g||^2 = w r + (1 - w)(p - r) for the mixing weight w
    p, r, kappa, draws = 25, 5, 0.7, 10_000
    cov = make_spiked_covariance(p, r, 3.0, 1.0, seed=6)
    w = prior_weight(kappa, r, p, convention)
    inside, total = np.empty(draws), np.empty(draws)
    for i in range(draws):
        g = sample_gamma_star(cov, kappa, seed=i, convention=convention).gamma_star
        a = cov.U.columns.T @ g
        inside[i], total[i] = a @ a, g @ g
    for values, expected in ((inside, w * r), (total, w * r + (1 - w) * (p - r))):
        se = values.std(ddof=1) / np.sqrt(draws)
        assert abs(values.mean() - expected) < 3 * se
    if convention == "expected_ratio":
        assert w * r / (w * r + (1 - w) * (p - r)) == pytest.approx(kappa)


def test_isotropic_design_covariance():
    n = 4000
    X = sample_design(np.eye(5), n, seed=7)
    assert np.max(np.abs(X @ X.T / n - np.eye(5))) < 5 / np.sqrt(n)


def test_rank_deficient_design_stays_in_range():
    cov = make_spiked_covariance(12, 3, 2.0, 0.0, seed=8)
    X = sample_design(cov, 50, seed=9)
    U = cov.U.columns
    assert np.max(np.abs(X - U @ (U.T @ X))) < 1e-8


def test_design_covariance_law_of_large_numbers():
    cov = make_spiked_covariance(20, 3, {"uniform": [2, 4]}, {"uniform": [1, 3]}, seed=10)
    n = 100_000
    X = sample_design(cov, n, seed=11)
    emp = np.einsum("ij,ij->i", X, X) / n
    assert np.max(np.abs(emp / np.diag(cov.matrix) - 1)) < 0.02


def test_rademacher_design_has_unit_entries():
    cov = make_spiked_covariance(5, 1, 2.0, 1.0, seed=0)
    X = sample_design(np.eye(3), 10, seed=1, dist="rademacher")
    assert set(np.unique(X)) <= {-1.0, 1.0}
    assert sample_design(cov, 4, seed=1, dist="rademacher").shape == (5, 4)


def test_response_examples():
    cov = make_spiked_covariance(8, 2, 2.0, 1.0, seed=12)
    X = sample_design(cov, 30, seed=13)
    t1 = sample_gamma_star(cov, 0.9, seed=14, sigma2=0.0)
    t2 = sample_gamma_star(cov, 0.5, seed=15, sigma2=0.0)
    assert np.array_equal(sample_response(X, t1), X.T @ t1.gamma_star)
    both = type(t1)(t1.gamma_star + t2.gamma_star, 0.9, 0.0, 0, 0, 0)
    assert np.allclose(sample_response(X, both), sample_response(X, t1) + sample_response(X, t2), atol=1e-12)
    zero = type(t1)(np.zeros(8), 0.9, 2.0, 0, 0, 0)
    eps = sample_response(sample_design(cov, 20_000, seed=16), zero, seed=17)
    se = np.sqrt(2 * 2.0**2 / eps.size)
    assert abs(eps.var(ddof=1) - 2.0) < 3 * se


def test_exact_risk_examples():
    rng = np.random.default_rng(18)
    g = rng.standard_normal(6)
    assert exact_risk(g, g, np.eye(6)) == 0.0
    h = rng.standard_normal(6)
    assert exact_risk(h, g, np.eye(6)) == pytest.approx(np.sum((h - g) ** 2))


def test_exact_risk_matches_fresh_draw_monte_carlo():
    cov = make_spiked_covariance(10, 2, {"uniform": [2, 4]}, {"uniform": [1, 3]}, seed=19)
    rng = np.random.default_rng(20)
    g, h = rng.standard_normal(10), rng.standard_normal(10)
    x0 = sample_design(cov, 1_000_000, seed=21)
    mc = np.mean((x0.T @ (h - g)) ** 2)
    assert mc == pytest.approx(exact_risk(h, g, cov), rel=0.01)


@given(seed=st.integers(0, 2**32 - 1))
def test_exact_risk_non_negative(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((5, 3))
    assert exact_risk(rng.standard_normal(5), rng.standard_normal(5), A @ A.T) >= 0.0


# -- Monte Carlo --------------------------------------------------------------------------------------

SMALL = dict(p=60, r=3, n=40, sigma2=1.0, cov_seed=1)


def test_aligned_noiseless_beats_misaligned():
    good = monte_carlo_risk(Scenario(kappa=1.0, **{**SMALL, "sigma2": 0.0}), cpcr_estimator(5.0), 6, seed=2)
    bad = monte_carlo_risk(Scenario(kappa=0.8, **{**SMALL, "sigma2": 0.0}), cpcr_estimator(5.0), 6, seed=2)
    assert good.total < 0.1 * bad.total


def test_monte_carlo_is_reproducible():
    sc = Scenario(kappa=0.9, **SMALL)
    a = monte_carlo_risk(sc, cpcr_estimator(2.0), 10, seed=3)
    b = monte_carlo_risk(sc, cpcr_estimator(2.0), 10, seed=3)
    assert (a.total, a.std_error) == (b.total, b.std_error)


def test_replicate_streams_depend_only_on_seed_and_index():
    sc = Scenario(kappa=0.9, **SMALL)
    a, b = draw_replicate(sc, 5, 3), draw_replicate(sc, 5, 3)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.X, draw_replicate(sc, 5, 4).X)


def test_cpcr_beats_pcr_on_misaligned_scenario():
    sc = Scenario(p=200, r=5, n=100, kappa=0.9, cov_seed=2)
    res = monte_carlo_risks(sc, {"cpcr": cpcr_estimator(20.0), "pcr": pcr_estimator()}, 10, seed=4)
    assert res.risks["cpcr"].total < res.risks["pcr"].total


def failing_estimator(every):
    def fit(X, y, rep):
        if int(rep.aux_seed) % every == 0:
            raise RuntimeError("boom")
        return np.zeros(X.shape[0])
    return fit


def test_failures_are_recorded_and_aggregated():
    sc = Scenario(kappa=0.9, **SMALL)

    def always(X, y, rep):
        raise ValueError("always fails")

    res = monte_carlo_risks(sc, {"bad": always, "ok": pcr_estimator()}, 5, seed=0)
    assert isinstance(res.risks["bad"], AggregateError)
    assert len(res.failures["bad"]) == 5 and res.per_replicate["bad"] == [None] * 5
    assert isinstance(res.risks["ok"], RiskDecomposition)
    with pytest.raises(AggregateError):
        monte_carlo_risk(sc, always, 5, seed=0)


def test_decomposition_matches_monte_carlo_total():
    sc = Scenario(p=150, r=5, n=100, kappa=0.9, cov_seed=3)
    emp = empirical_bias_variance(sc, 10.0, 20, seed=5)
    mc = monte_carlo_risk(sc, cpcr_estimator(10.0), 20, seed=5)
    assert abs(emp.total - mc.total) <= 2 * mc.std_error
    # fold symmetry on an even-n scenario
    assert emp.bias_1 == pytest.approx(emp.bias_2, rel=0.25)
    assert emp.var_1 == pytest.approx(emp.var_2, rel=0.25)


def test_decomposition_edge_cases():
    aligned = empirical_bias_variance(Scenario(p=400, r=10, n=200, kappa=1.0, cov_seed=0), 10.0, 3, seed=6)
    assert aligned.bias / aligned.total < 0.05
    quiet = empirical_bias_variance(Scenario(kappa=0.8, **{**SMALL, "sigma2": 0.0}), 1.0, 3, seed=7)
    assert quiet.var_1 == pytest.approx(0.0, abs=1e-12) and quiet.var_2 == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(UnsupportedFamilyError):
        empirical_bias_variance(Scenario(kappa=0.8, **SMALL), 1.0, 3, seed=7, family=GlmFamily.bernoulli())


def test_combination_weights_are_exact():
    d = RiskDecomposition.combine(bias_1=1.0, bias_2=2.0, bias_cross=3.0, var_1=4.0, var_2=5.0, var_cross=6.0)
    assert d.total == 0.25 * (1 + 2 + 4 + 5) + 0.5 * (3 + 6)
    assert d.bias + d.variance == d.total


def test_scenario_monotone_in_kappa():
    means, ses = [], []
    for kappa in (0.5, 0.7, 0.9, 0.99):
        res = monte_carlo_risk(Scenario(p=200, r=5, n=100, kappa=kappa, cov_seed=4), cpcr_estimator(5.0), 10, 8)
        means.append(res.total)
        ses.append(res.std_error)
    for i in range(3):
        assert means[i + 1] <= means[i] + 2 * np.hypot(ses[i], ses[i + 1])


def test_generic_sqrt_zeroes_roundoff_eigenvalues():
    cov = make_spiked_covariance(12, 3, 2.0, 0.0, seed=8)
    X = sample_design(cov.matrix, 50, seed=9)
    U = cov.U.columns
    assert np.max(np.abs(X - U @ (U.T @ X))) < 1e-8
