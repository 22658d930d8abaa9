"""Spiked-covariance scenarios and Monte Carlo risk estimates."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Mapping

import numpy as np

from .cpcr import CpcrConfig, cpcr_fit
from .decomposition import RiskDecomposition
from .errors import AggregateError, DimensionError, InputError, ParameterError, UnsupportedFamilyError
from .estimators import GAUSSIAN, GlmFamily, pcr_fit, ridge_fit
from .spectral import OrthonormalBasis, predictive_power

SQRT_CLIP = 1e-12
MIN_SUCCESS = 0.8


@dataclass(frozen=True)
class EigenSpec:
    """Recipe for a block of diagonal eigenvalues.

    ``kind`` is ``"uniform"`` (``low``, ``high``), ``"constant"`` (``value``)
    or ``"values"`` (an explicit list, tiled or truncated to length).
    """

    kind: str = "uniform"
    low: float = 0.0
    high: float = 1.0
    value: float = 0.0
    values: tuple = ()

    @classmethod
    def parse(cls, spec):
        if isinstance(spec, EigenSpec):
            return spec
        if isinstance(spec, (int, float)):
            return cls("constant", value=float(spec))
        if isinstance(spec, (list, tuple)):
            return cls("values", values=tuple(float(v) for v in spec))
        if isinstance(spec, Mapping):
            if "uniform" in spec:
                low, high = spec["uniform"]
                return cls("uniform", low=float(low), high=float(high))
            if "constant" in spec:
                return cls("constant", value=float(spec["constant"]))
            if "values" in spec:
                return cls("values", values=tuple(float(v) for v in spec["values"]))
        raise ParameterError(f"cannot interpret eigenvalue spec {spec!r}")

    def to_config(self):
        if self.kind == "uniform":
            return {"uniform": [self.low, self.high]}
        if self.kind == "constant":
            return {"constant": self.value}
        return {"values": list(self.values)}

    def sample(self, k, rng):
        if k == 0:
            raise InputError("cannot sample an empty spectrum")
        if self.kind == "uniform":
            if self.high < self.low or self.low < 0:
                raise ParameterError("uniform spectrum needs 0 <= low <= high")
            return rng.uniform(self.low, self.high, size=k)
        if self.kind == "constant":
            return np.full(k, self.value)
        if not self.values:
            raise InputError("explicit spectrum is empty")
        return np.resize(np.asarray(self.values, dtype=float), k)


def matrix_sqrt(Sigma):
    """Symmetric PSD square root.

    Eigenvalues within ``1e-12`` (relative to the largest) of zero are
    treated as round-off and set to zero; materially negative ones raise.
    """
    vals, vecs = np.linalg.eigh(0.5 * (Sigma + Sigma.T))
    floor = SQRT_CLIP * max(1.0, np.max(np.abs(vals)))
    if np.min(vals) < -floor:
        raise InputError("covariance has a materially negative eigenvalue")
    vals = np.where(vals > floor, vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


@dataclass(frozen=True, eq=False)
class SpikedCovariance:
    U: OrthonormalBasis
    V: OrthonormalBasis
    sigma_s: np.ndarray
    sigma_c: np.ndarray

    @property
    def p(self):
        return self.U.p

    @property
    def r(self):
        return self.U.k

    @cached_property
    def matrix(self):
        U, V = self.U.columns, self.V.columns
        S = (U * self.sigma_s) @ U.T + (V * self.sigma_c) @ V.T
        return 0.5 * (S + S.T)

    @cached_property
    def sqrt(self):
        # built from the blocks, so a zero background stays exactly outside the range
        U, V = self.U.columns, self.V.columns
        R = (U * np.sqrt(self.sigma_s)) @ U.T + (V * np.sqrt(self.sigma_c)) @ V.T
        return 0.5 * (R + R.T)


def _orthogonal(p, rng):
    Q, R = np.linalg.qr(rng.standard_normal((p, p)))
    return Q * np.sign(np.diag(R))


def make_spiked_covariance(p, r, spec_s, spec_c, seed=None) -> SpikedCovariance:
    p, r = int(p), int(r)
    if not 1 <= r < p:
        raise DimensionError(f"need 1 <= r < p, got r={r}, p={p}")
    rng = np.random.default_rng(seed)
    Q = _orthogonal(p, rng)
    sigma_s = EigenSpec.parse(spec_s).sample(r, rng)
    sigma_c = EigenSpec.parse(spec_c).sample(p - r, rng)
    if np.any(sigma_s < 0) or np.any(sigma_c < 0):
        raise ParameterError("eigenvalues must be non-negative")
    return SpikedCovariance(OrthonormalBasis(Q[:, :r]), OrthonormalBasis(Q[:, r:]), sigma_s, sigma_c)


KAPPA_CONVENTIONS = ("prior", "expected_ratio")


def prior_weight(kappa, r, p, convention="prior"):
    """Mixing weight of the coefficient prior for a requested ``kappa``.

    ``"prior"`` uses ``kappa`` itself as the weight on ``P_U``. With
    ``"expected_ratio"`` the weight is solved so that the expected fraction
    of squared norm inside the spike subspace equals ``kappa``.
    """
    kappa = float(kappa)
    if not 0 < kappa <= 1:
        raise ParameterError(f"kappa must lie in (0, 1], got {kappa}")
    if convention == "prior" or kappa == 1:
        if convention not in KAPPA_CONVENTIONS:
            raise ParameterError(f"unknown kappa convention {convention!r}")
        return kappa
    if convention != "expected_ratio":
        raise ParameterError(f"unknown kappa convention {convention!r}")
    return 1.0 / (1.0 + (1.0 / kappa - 1.0) * r / (p - r))


@dataclass(frozen=True)
class GroundTruth:
    """Coefficient draw with both alignment conventions recorded.

    ``kappa_param`` is the requested alignment and ``mixing_weight`` the
    prior's weight on the spike subspace (equal unless the expected-ratio
    convention was used). ``realized_kappa`` is this draw's fraction of
    squared norm inside the spike subspace and ``expected_ratio`` the value
    ``w r / (w r + (1 - w)(p - r))`` it concentrates around.
    """

    gamma_star: np.ndarray
    kappa_param: float
    sigma2: float
    realized_kappa: float
    expected_ratio: float
    mixing_weight: float


def sample_gamma_star(cov: SpikedCovariance, kappa, seed=None, sigma2=1.0, convention="prior") -> GroundTruth:
    """Draw coefficients with covariance ``w * P_U + (1 - w) * P_V``, ``w`` from :func:`prior_weight`."""
    r, p = cov.r, cov.p
    w = prior_weight(kappa, r, p, convention)
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(r)
    b = rng.standard_normal(p - r)
    gamma = np.sqrt(w) * (cov.U.columns @ a)
    if w < 1:
        gamma = gamma + np.sqrt(1 - w) * (cov.V.columns @ b)
    expected = w * r / (w * r + (1 - w) * (p - r))
    return GroundTruth(gamma, float(kappa), float(sigma2), predictive_power(gamma, cov.U), expected, w)


def _standard(shape, rng, dist):
    if dist == "gaussian":
        return rng.standard_normal(shape)
    if dist == "rademacher":
        return rng.choice(np.array([-1.0, 1.0]), size=shape)
    raise ParameterError(f"unknown noise distribution {dist!r}")


def sample_design(cov, n, seed=None, dist="gaussian"):
    """Feature-major design ``Sigma^{1/2} Z`` with ``Z`` of shape ``(p, n)``."""
    n = int(n)
    if n < 1:
        raise DimensionError("n must be positive")
    root = cov.sqrt if isinstance(cov, SpikedCovariance) else matrix_sqrt(np.asarray(cov, dtype=float))
    rng = np.random.default_rng(seed)
    return root @ _standard((root.shape[0], n), rng, dist)


def sample_response(X, gt: GroundTruth, seed=None, dist="gaussian"):
    X = np.asarray(X, dtype=float)
    if X.shape[0] != gt.gamma_star.shape[0]:
        raise DimensionError("design and coefficients disagree on p")
    signal = X.T @ gt.gamma_star
    if gt.sigma2 == 0:
        return signal
    rng = np.random.default_rng(seed)
    return signal + np.sqrt(gt.sigma2) * _standard(X.shape[1], rng, dist)


def exact_risk(gamma_hat, gamma_star, Sigma) -> float:
    """``(g - g*)^T Sigma (g - g*)``: expected squared prediction error at a fresh point."""
    Sigma = Sigma.matrix if isinstance(Sigma, SpikedCovariance) else np.asarray(Sigma, dtype=float)
    d = np.asarray(gamma_hat, dtype=float) - np.asarray(gamma_star, dtype=float)
    return float(max(d @ Sigma @ d, 0.0))


# -- scenarios and replicates ----------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """One synthetic setting. The covariance (hence ``U``, ``V``) is fixed by ``cov_seed``."""

    p: int
    r: int
    n: int
    kappa: float
    sigma2: float = 1.0
    spec_s: EigenSpec = field(default_factory=lambda: EigenSpec("uniform", 2.0, 4.0))
    spec_c: EigenSpec = field(default_factory=lambda: EigenSpec("uniform", 1.0, 3.0))
    cov_seed: int = 0
    design_dist: str = "gaussian"
    noise_dist: str = "gaussian"
    kappa_convention: str = "prior"

    def __post_init__(self):
        object.__setattr__(self, "spec_s", EigenSpec.parse(self.spec_s))
        object.__setattr__(self, "spec_c", EigenSpec.parse(self.spec_c))
        prior_weight(self.kappa, self.r, self.p, self.kappa_convention)

    @property
    def mixing_weight(self):
        return prior_weight(self.kappa, self.r, self.p, self.kappa_convention)

    @classmethod
    def from_aspect(cls, p, c, **kw):
        return cls(p=p, n=int(round(p / c)), **kw)

    @property
    def c(self):
        return self.p / self.n

    def covariance(self) -> SpikedCovariance:
        return _cached_covariance(self.p, self.r, self.spec_s, self.spec_c, self.cov_seed)

    def with_kappa(self, kappa):
        return replace(self, kappa=float(kappa))


_COV_CACHE: dict = {}


def _cached_covariance(p, r, spec_s, spec_c, seed):
    key = (p, r, spec_s, spec_c, seed)
    if key not in _COV_CACHE:
        if len(_COV_CACHE) > 32:
            _COV_CACHE.clear()
        _COV_CACHE[key] = make_spiked_covariance(p, r, spec_s, spec_c, seed)
    return _COV_CACHE[key]


@dataclass(frozen=True)
class Replicate:
    X: np.ndarray
    y: np.ndarray
    truth: GroundTruth
    cov: SpikedCovariance
    split_seed: int
    aux_seed: int


def draw_replicate(scenario: Scenario, seed, index) -> Replicate:
    """Fresh coefficients, design and noise; streams depend only on ``(seed, index)``."""
    ss = np.random.SeedSequence([int(seed), int(index)])
    s_gamma, s_design, s_noise, s_split, s_aux = (int(c.generate_state(1)[0]) for c in ss.spawn(5))
    cov = scenario.covariance()
    truth = sample_gamma_star(cov, scenario.kappa, s_gamma, scenario.sigma2, scenario.kappa_convention)
    X = sample_design(cov, scenario.n, s_design, scenario.design_dist)
    y = sample_response(X, truth, s_noise, scenario.noise_dist)
    return Replicate(X, y, truth, cov, s_split, s_aux)


Estimator = Callable[[np.ndarray, np.ndarray, Replicate], np.ndarray]


def _aggregate(values, provenance="empirical"):
    values = np.asarray(values, dtype=float)
    k = values.size
    se = float(np.std(values, ddof=1) / np.sqrt(k)) if k > 1 else float("nan")
    nan = float("nan")
    return RiskDecomposition(nan, nan, nan, nan, nan, nan, float(np.mean(values)), provenance, k, se)


@dataclass
class MonteCarloResult:
    """Per-method aggregates plus the raw per-replicate risks (``None`` = failed)."""

    risks: dict
    per_replicate: dict
    failures: dict


def monte_carlo_risks(scenario: Scenario, estimators: Mapping[str, Estimator], replicates, seed) -> MonteCarloResult:
    """Evaluate several estimators on shared replicate draws."""
    replicates = int(replicates)
    if replicates < 2:
        raise ParameterError("need at least 2 replicates")
    per = {name: [] for name in estimators}
    fails = {name: [] for name in estimators}
    for i in range(replicates):
        rep = draw_replicate(scenario, seed, i)
        for name, est in estimators.items():
            try:
                gamma = est(rep.X, rep.y, rep)
                per[name].append(exact_risk(gamma, rep.truth.gamma_star, rep.cov))
            except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
                per[name].append(None)
                fails[name].append((i, repr(exc)))
    risks = {}
    for name, vals in per.items():
        ok = [v for v in vals if v is not None]
        if len(ok) < MIN_SUCCESS * replicates or len(ok) < 2:
            risks[name] = AggregateError(f"{name}: {len(ok)}/{replicates} replicates succeeded", fails[name])
        else:
            risks[name] = _aggregate(ok)
    return MonteCarloResult(risks, per, fails)


def monte_carlo_risk(scenario: Scenario, estimator: Estimator, replicates, seed) -> RiskDecomposition:
    result = monte_carlo_risks(scenario, {"estimator": estimator}, replicates, seed)
    out = result.risks["estimator"]
    if isinstance(out, Exception):
        raise out
    return out


# -- estimator factories -----------------------------------------------------------------------

def cpcr_estimator(lam, r=None, source="oracle", family=GAUSSIAN) -> Estimator:
    """CPCR with the oracle basis (``source="oracle"``) or an estimated one."""

    def fit(X, y, rep):
        cfg = _cpcr_config(rep, lam, r, source, family)
        return cpcr_fit(X, y, cfg).gamma_cpcr

    return fit


def _cpcr_config(rep, lam, r, source, family=GAUSSIAN):
    if source == "oracle":
        return CpcrConfig(r=rep.cov.r, lam=lam, family=family, subspace_source="oracle", basis=rep.cov.U,
                          seed=rep.split_seed)
    return CpcrConfig(r=r if r is not None else rep.cov.r, lam=lam, family=family, subspace_source=source,
                      seed=rep.split_seed)


def pcr_estimator(r=None, source="oracle") -> Estimator:
    def fit(X, y, rep):
        if source == "oracle":
            return pcr_fit(X, y, basis=rep.cov.U)[0]
        return pcr_fit(X, y, r if r is not None else rep.cov.r)[0]

    return fit


def ridge_estimator(lam) -> Estimator:
    def fit(X, y, rep):
        return ridge_fit(X, y, lam)

    return fit


# -- linearity-based decomposition ---------------------------------------------------------------

def _fold_errors(X, y, rep, cfg, plan=None):
    fit = cpcr_fit(X, y, cfg, plan)
    return fit, [f.gamma_calib for f in fit.folds]


def empirical_bias_variance(scenario: Scenario, lam, replicates, seed, family=GAUSSIAN, r=None,
                            source="oracle") -> RiskDecomposition:
    """Split the CPCR risk into bias and variance parts by linearity in ``y``.

    For each replicate the fit is repeated on the noiseless response (bias
    runs) and on the pure-noise response (variance runs) with the same
    split and basis.
    """
    if GlmFamily.parse(family).kind != "gaussian":
        raise UnsupportedFamilyError("bias/variance separation needs the gaussian family")
    replicates = int(replicates)
    if replicates < 2:
        raise ParameterError("need at least 2 replicates")
    keys = ("bias_1", "bias_2", "bias_cross", "var_1", "var_2", "var_cross")
    rows = []
    for i in range(replicates):
        rep = draw_replicate(scenario, seed, i)
        cfg = _cpcr_config(rep, lam, r, source)
        Sigma = rep.cov.matrix
        signal = rep.X.T @ rep.truth.gamma_star
        noise = rep.y - signal
        fit, bias_fits = _fold_errors(rep.X, signal, rep, cfg)
        _, var_fits = _fold_errors(rep.X, noise, rep, cfg, fit.split)
        eb = [g - rep.truth.gamma_star for g in bias_fits]
        ev = var_fits
        rows.append([
            eb[0] @ Sigma @ eb[0], eb[1] @ Sigma @ eb[1], eb[0] @ Sigma @ eb[1],
            ev[0] @ Sigma @ ev[0], ev[1] @ Sigma @ ev[1], ev[0] @ Sigma @ ev[1],
        ])
    rows = np.asarray(rows)
    means = dict(zip(keys, rows.mean(axis=0)))
    weights = np.array([0.25, 0.25, 0.5, 0.25, 0.25, 0.5])
    totals = rows @ weights
    se = float(np.std(totals, ddof=1) / np.sqrt(replicates))
    return RiskDecomposition.combine("empirical", replicates=replicates, std_error=se, **means)
