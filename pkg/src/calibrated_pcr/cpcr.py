"""Calibrated principal component regression by two-fold cross-fitting.

Each fold first fits a regression on its own principal coordinates; the
resulting coefficient vector becomes the center of a Tikhonov penalty for a
full-dimensional fit on the other fold. The two calibrated fits are then
averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, FoldError, InputError, ParameterError
from .estimators import GAUSSIAN, GlmFamily, glm_calibrated_fit, pcr_fit
from .spectral import OrthonormalBasis, as_basis, estimate_subspace

SUBSPACE_SOURCES = ("per_fold", "pooled_unlabeled", "oracle")


@dataclass(frozen=True)
class SplitPlan:
    fold1_indices: np.ndarray
    fold2_indices: np.ndarray
    seed: int | None = None

    def swapped(self) -> "SplitPlan":
        return SplitPlan(self.fold2_indices, self.fold1_indices, self.seed)

    @property
    def folds(self):
        return (self.fold1_indices, self.fold2_indices)


@dataclass(frozen=True)
class CpcrConfig:
    """Settings for :func:`cpcr_fit`.

    ``subspace_source`` selects where the principal basis comes from:
    ``"per_fold"`` estimates it on the fold used for the initial fit,
    ``"pooled_unlabeled"`` estimates it once from ``unlabeled`` features (or
    from all of ``X`` when none are given) and ``"oracle"`` uses ``basis``.
    """

    r: int
    lam: float
    family: GlmFamily = GAUSSIAN
    subspace_source: str = "per_fold"
    basis: OrthonormalBasis | None = None
    unlabeled: np.ndarray | None = field(default=None, repr=False)
    seed: int | None = 0
    init_penalty: float = 1e-3
    tol: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        if int(self.r) < 1:
            raise ParameterError("r must be at least 1")
        if not float(self.lam) > 0:
            raise ParameterError("lam must be positive")
        if self.subspace_source not in SUBSPACE_SOURCES:
            raise ParameterError(f"subspace_source must be one of {SUBSPACE_SOURCES}")
        if self.subspace_source == "oracle":
            if self.basis is None:
                raise ParameterError("oracle subspace requires a basis")
            object.__setattr__(self, "basis", as_basis(self.basis))
            object.__setattr__(self, "r", self.basis.k)
        object.__setattr__(self, "family", GlmFamily.parse(self.family))


@dataclass(frozen=True)
class FoldRecord:
    basis: OrthonormalBasis
    zeta: np.ndarray
    gamma_init: np.ndarray
    gamma_calib: np.ndarray
    iterations: int = 0


@dataclass(frozen=True)
class CpcrFit:
    gamma_cpcr: np.ndarray
    folds: tuple
    split: SplitPlan
    config: CpcrConfig

    def predict(self, X0):
        return predict(self, X0, self.config.family)


def split(n, seed=None) -> SplitPlan:
    """Random partition of ``range(n)`` into two halves; fold 1 gets the odd sample."""
    n = int(n)
    if n < 4:
        raise InputError(f"need at least 4 samples to cross-fit, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    half = (n + 1) // 2
    return SplitPlan(np.sort(perm[:half]), np.sort(perm[half:]), seed)


def _fold_basis(config, X_fit, pooled):
    if config.subspace_source == "oracle":
        return config.basis
    if config.subspace_source == "pooled_unlabeled":
        return pooled
    return estimate_subspace(X_fit, config.r)


def cpcr_fit(X, y, config: CpcrConfig, plan: SplitPlan | None = None) -> CpcrFit:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[1] != y.shape[0]:
        raise DimensionError("X must be (p, n) with one column per entry of y")
    n = X.shape[1]
    plan = split(n, config.seed) if plan is None else plan
    if config.subspace_source == "per_fold":
        smallest = min(len(plan.fold1_indices), len(plan.fold2_indices))
        if config.r > min(X.shape[0], smallest):
            raise DimensionError(f"r={config.r} exceeds min(p, fold size)={min(X.shape[0], smallest)}")
    pooled = None
    if config.subspace_source == "pooled_unlabeled":
        source = X if config.unlabeled is None else np.asarray(config.unlabeled, dtype=float)
        pooled = estimate_subspace(source, config.r)

    records = []
    for k, (fit_idx, cal_idx) in enumerate((plan.folds, plan.folds[::-1]), start=1):
        try:
            basis = _fold_basis(config, X[:, fit_idx], pooled)
            gamma_init, basis, zeta = pcr_fit(
                X[:, fit_idx], y[fit_idx], basis=basis, family=config.family, init_penalty=config.init_penalty
            )
            result = glm_calibrated_fit(
                X[:, cal_idx], y[cal_idx], config.lam, gamma_init, config.family, config.tol, config.max_iter
            )
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            raise FoldError(k, exc) from exc
        records.append(FoldRecord(basis, zeta, gamma_init, result.coefficients, result.iterations))
    gamma = 0.5 * (records[0].gamma_calib + records[1].gamma_calib)
    return CpcrFit(gamma, tuple(records), plan, config)


def predict(fit, X0, family=GAUSSIAN):
    """Linear predictor for gaussian models, otherwise the argmax class label."""
    family = GlmFamily.parse(family)
    coef = fit.gamma_cpcr if isinstance(fit, CpcrFit) else np.asarray(fit, dtype=float)
    X0 = np.asarray(X0, dtype=float)
    if X0.shape[0] != coef.shape[0]:
        raise DimensionError(f"X0 has {X0.shape[0]} features, coefficients have {coef.shape[0]}")
    eta = X0.T @ coef
    if family.kind == "gaussian":
        return eta
    if family.kind == "bernoulli":
        return (eta > 0).astype(int)
    return np.argmax(eta, axis=1)


def with_lambda(config: CpcrConfig, lam) -> CpcrConfig:
    return replace(config, lam=float(lam))
