"""Deterministic risk predictions for cross-fitted calibration.

Conventions
-----------
The calibration weight ``lam`` is the one used by
:func:`calibrated_pcr.estimators.centered_ridge_fit` (loss summed over the
fold, no ``1/m``). Every resolvent quantity is evaluated at the per-sample
shift ``lam / n_fold``.

The companion transform ``m(rho, z)`` is the positive root of::

    1/m = -z + (1/n_fold) * sum_j mu_j / (1 + mu_j (m + rho))

where the sum runs over all ``p`` population eigenvalues (spike and
background) and it is evaluated at ``z = -lam/n_fold``, ``rho = 0``. The
``rho`` shift perturbs the argument of the spectral sum; with this choice
the printed limits for the single-fold bias and its cross-fold counterpart,
and their derivatives in ``lam``, are mutually consistent.

On top of those asymptotic terms, :func:`initializer_terms` adds the
contributions of the fold-wise least-squares initializer, which are of
order ``r / n_fold`` and matter at moderate sample sizes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .decomposition import RiskDecomposition
from .errors import ConsistencyError, ParameterError, SolverError

MAX_SOLVER_ITER = 10_000
RESIDUAL_TOL = 1e-10
FD_RTOL = 1e-4


class BracketWarning(UserWarning):
    """The risk minimum sits on the edge of the search bracket."""


@dataclass(frozen=True)
class SpectralMeasure:
    """Uniform measure on the background eigenvalues."""

    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float).ravel()
        if atoms.size == 0:
            raise ParameterError("spectral measure needs at least one atom")
        if not np.all(np.isfinite(atoms)) or np.any(atoms < 0):
            raise ParameterError("atoms must be finite and non-negative")
        object.__setattr__(self, "atoms", atoms)

    @property
    def weights(self):
        return np.full(self.atoms.size, 1.0 / self.atoms.size)

    def integrate(self, f):
        return float(np.mean(f(self.atoms)))


@dataclass(frozen=True)
class RmtInput:
    """Scenario description for the risk formulas.

    ``sigma_s`` are the spike eigenvalues, ``nu_c`` the background measure;
    ``n_fold`` is the calibration fold size and ``n_init`` the size of the
    fold that produces the initializer (equal for even ``n``).
    """

    nu_c: SpectralMeasure
    sigma_s: np.ndarray
    n_fold: int
    kappa: float
    sigma2: float
    lam: float
    n_init: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "sigma_s", np.asarray(self.sigma_s, dtype=float).ravel())
        if self.n_init is None:
            object.__setattr__(self, "n_init", self.n_fold)
        if not 0 <= self.kappa <= 1:
            raise ParameterError("kappa must lie in [0, 1]")
        if self.sigma2 < 0:
            raise ParameterError("noise variance must be non-negative")
        if not self.lam > 0:
            raise ParameterError("lam must be positive")
        if self.n_fold < 1:
            raise ParameterError("n_fold must be positive")

    @classmethod
    def from_spectra(cls, sigma_s, sigma_c, n, kappa, sigma2, lam):
        """Scenario with ``n`` total samples split into two folds."""
        n = int(n)
        return cls(SpectralMeasure(sigma_c), sigma_s, n // 2, kappa, sigma2, lam, n_init=(n + 1) // 2)

    @property
    def r(self) -> int:
        return self.sigma_s.size

    @property
    def p(self) -> int:
        return self.r + self.nu_c.atoms.size

    @property
    def c_eff(self) -> float:
        return self.p / self.n_fold

    @property
    def shift(self) -> float:
        return self.lam / self.n_fold

    @property
    def eigenvalues(self):
        return np.concatenate([self.sigma_s, self.nu_c.atoms])

    def with_lambda(self, lam) -> "RmtInput":
        return RmtInput(self.nu_c, self.sigma_s, self.n_fold, self.kappa, self.sigma2, float(lam), self.n_init)

    def with_kappa(self, kappa) -> "RmtInput":
        return RmtInput(self.nu_c, self.sigma_s, self.n_fold, float(kappa), self.sigma2, self.lam, self.n_init)


@dataclass(frozen=True)
class TransformValues:
    m: float
    m_rho: float = float("nan")
    m_z: float = float("nan")
    m_rho_z: float = float("nan")
    m_zz: float = float("nan")
    residual: float = 0.0

    @property
    def inverse_stability(self) -> float:
        """``m_z / m^2``, i.e. one over the stability factor of the fixed point."""
        return self.m_z / self.m**2


# -- fixed point ---------------------------------------------------------------

def _normalized_residual(m, eigs, n, shift, rho=0.0):
    """``m * (1/m - shift - F(m + rho))``; increasing in ``m``, zero at the root."""
    return 1.0 - m * shift - m * np.sum(eigs / (1.0 + eigs * (m + rho))) / n


def _solve(eigs, n, shift, rho=0.0):
    if shift <= 0:
        raise ParameterError("the resolvent shift must be positive")
    f = lambda m: -_normalized_residual(m, eigs, n, shift, rho)  # noqa: E731
    hi = 1.0 / shift
    if f(hi) <= 0:
        # only possible when every eigenvalue is zero: then m = 1/shift exactly
        return hi, abs(f(hi))
    lo = hi
    for _ in range(200):
        lo *= 0.5
        if f(lo) < 0:
            break
    else:
        raise SolverError(f"could not bracket the companion transform below {lo:.3e}")
    try:
        m, info = brentq(f, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
                         maxiter=MAX_SOLVER_ITER, full_output=True)
    except RuntimeError as exc:
        raise SolverError(f"companion transform bracket [{lo:.3e}, {hi:.3e}] did not converge: {exc}") from exc
    if not info.converged:
        raise SolverError(f"companion transform bracket [{lo:.3e}, {hi:.3e}] did not converge")
    # two Newton polishing steps on 1/m - shift - F(m + rho)
    for _ in range(2):
        denom = 1.0 + eigs * (m + rho)
        g = 1.0 / m - shift - np.sum(eigs / denom) / n
        dg = -1.0 / m**2 + np.sum(eigs**2 / denom**2) / n
        step = g / dg
        if np.isfinite(step) and 0 < m - step:
            m -= step
    return m, abs(_normalized_residual(m, eigs, n, shift, rho))


def solve_companion_transform(inp: RmtInput) -> TransformValues:
    m, residual = _solve(inp.eigenvalues, inp.n_fold, inp.shift)
    if residual > RESIDUAL_TOL:
        raise SolverError(f"fixed-point residual {residual:.3e} exceeds {RESIDUAL_TOL:.0e}")
    return TransformValues(m=m, residual=residual)


def _moments(m, eigs, n):
    d = 1.0 + eigs * m
    s2 = np.sum(eigs**2 / d**2) / n
    s3 = np.sum(eigs**3 / d**3) / n
    return s2, s3


def _implicit_partials(m, eigs, n):
    s2, s3 = _moments(m, eigs, n)
    phi_m = -1.0 / m**2 + s2
    phi_mm = 2.0 / m**3 - 2.0 * s3
    phi_mrho = -2.0 * s3
    m_z = -1.0 / phi_m
    m_rho = -s2 / phi_m
    m_zz = -phi_mm * m_z**2 / phi_m
    m_rho_z = -(phi_mm * m_rho * m_z + phi_mrho * m_z) / phi_m
    return m_rho, m_z, m_rho_z, m_zz


def _richardson(f, h):
    d1 = f(h)
    d2 = f(h / 2)
    return (4 * d2 - d1) / 3


def _dz(g, z0, h, central):
    """First derivative in ``z``; one-sided towards negative ``z`` when a central stencil would cross 0."""
    if central:
        return _richardson(lambda k: (g(z0 + k) - g(z0 - k)) / (2 * k), h)
    return _richardson(lambda k: (3 * g(z0) - 4 * g(z0 - k) + g(z0 - 2 * k)) / (2 * k), h)


def _dzz(g, z0, h, central):
    if central:
        return _richardson(lambda k: (g(z0 + k) - 2 * g(z0) + g(z0 - k)) / k**2, h)
    return _richardson(lambda k: (2 * g(z0) - 5 * g(z0 - k) + 4 * g(z0 - 2 * k) - g(z0 - 3 * k)) / k**2, h)


def finite_difference_partials(inp: RmtInput):
    """Richardson-extrapolated finite differences of the transform."""
    eigs, n, s = inp.eigenvalues, inp.n_fold, inp.shift
    M = lambda z, rho=0.0: _solve(eigs, n, -z, rho)[0]  # noqa: E731
    z0 = -s
    m0 = M(z0)
    # m varies on a z-scale of about 1/m; near z = 0 the stencil goes one-sided
    hz = 1e-3 / m0
    central = hz < 0.25 * s
    # rho enters through 1 + mu (m + rho), so its scale is m + 1/max(mu)
    top = np.max(eigs)
    hr = 1e-2 * (m0 + (1.0 / top if top > 0 else 0.0))
    m_rho_at = lambda z: _richardson(lambda k: (M(z, k) - M(z, -k)) / (2 * k), hr)  # noqa: E731
    m_z = _dz(M, z0, hz, central)
    m_zz = _dzz(M, z0, hz, central)
    m_rho = m_rho_at(z0)
    m_rho_z = _dz(m_rho_at, z0, hz, central)
    return m_rho, m_z, m_rho_z, m_zz


def transform_partials(inp: RmtInput, check: bool = True) -> TransformValues:
    """Transform and its partials by implicit differentiation.

    With ``check=True`` the partials are compared against finite
    differences and a :class:`ConsistencyError` is raised on disagreement
    beyond ``1e-4`` relative.
    """
    tv = solve_companion_transform(inp)
    m_rho, m_z, m_rho_z, m_zz = _implicit_partials(tv.m, inp.eigenvalues, inp.n_fold)
    if check:
        fd = finite_difference_partials(inp)
        analytic = (m_rho, m_z, m_rho_z, m_zz)
        for name, a, b in zip(("m_rho", "m_z", "m_rho_z", "m_zz"), analytic, fd):
            scale = max(abs(a), abs(b), 1e-300)
            # partials that vanish analytically are compared on the m_z scale
            if abs(a) < 1e-12 * abs(m_z):
                scale = abs(m_z)
            if abs(a - b) > FD_RTOL * scale:
                raise ConsistencyError(f"{name}: implicit {a:.10e} vs finite difference {b:.10e}")
    return TransformValues(tv.m, m_rho, m_z, m_rho_z, m_zz, tv.residual)


# -- limiting risk terms ---------------------------------------------------------

def theoretical_bias_terms(inp: RmtInput, tv: TransformValues):
    """Asymptotic single-fold and cross-fold bias from the background spectrum."""
    mu = inp.nu_c.atoms
    scale = (1.0 - inp.kappa) * mu.size
    d = 1.0 + tv.m * mu
    i1 = np.mean(mu / d)
    i2 = np.mean(mu / d**2)
    j2 = np.mean(mu**2 / d**2)
    b1 = scale * (i1 + tv.m_rho * i2 - tv.m * j2) if np.isfinite(tv.m_rho) else scale * (i1 - tv.m * j2)
    bc = scale * i2
    return {"B1": float(b1), "B2": float(b1), "B_cross": float(bc)}


def fold_variance(inp: RmtInput, tv: TransformValues) -> float:
    """Noise variance of one calibrated fit from its own calibration fold."""
    return float(inp.sigma2 * (tv.m_z / tv.m**2 - 1.0))


def theoretical_variance(inp: RmtInput, tv: TransformValues) -> float:
    """Variance of the averaged estimator, ``(V_1 + V_2)/4`` with equal folds."""
    return 0.5 * fold_variance(inp, tv)


def initializer_terms(inp: RmtInput, tv: TransformValues):
    """Finite-rank contributions of the least-squares initializer.

    The initializer's error in the signal subspace has covariance
    ``s^2 Sigma_s^{-1} / (n_init - r - 1)`` where ``s^2`` is the residual
    variance of the projected regression; it is shrunk by the calibration
    resolvent, and it also correlates with the other fold's resolvent.
    """
    dof = inp.n_init - inp.r - 1
    if dof <= 0:
        raise ParameterError(f"initializer needs n_init > r + 1, got n_init={inp.n_init}, r={inp.r}")
    sig = inp.sigma_s
    d = 1.0 + tv.m * sig
    t_u = float(np.sum(1.0 / d**2))
    t_x = float(np.sum(tv.m * sig / d**2))
    leak = (1.0 - inp.kappa) * float(np.sum(inp.nu_c.atoms))
    inv_stab = tv.m_z / tv.m**2
    return {
        "bias_fold": leak * t_u * inv_stab / dof,
        "var_fold": inp.sigma2 * t_u * inv_stab / dof,
        "bias_cross": 2.0 * leak * t_x / dof,
        "var_cross": 2.0 * inp.sigma2 * t_x / dof,
    }


def theoretical_risk(inp: RmtInput, finite_rank: bool = True, check: bool = False) -> RiskDecomposition:
    tv = transform_partials(inp, check=check)
    bias = theoretical_bias_terms(inp, tv)
    v = fold_variance(inp, tv)
    parts = dict(bias_1=bias["B1"], bias_2=bias["B2"], bias_cross=bias["B_cross"], var_1=v, var_2=v, var_cross=0.0)
    if finite_rank:
        extra = initializer_terms(inp, tv)
        parts["bias_1"] += extra["bias_fold"]
        parts["bias_2"] += extra["bias_fold"]
        parts["bias_cross"] += extra["bias_cross"]
        parts["var_1"] += extra["var_fold"]
        parts["var_2"] += extra["var_fold"]
        parts["var_cross"] = extra["var_cross"]
    return RiskDecomposition.combine("theoretical", **parts)


# -- derivatives in lambda ---------------------------------------------------------

def bias_derivative(inp: RmtInput, tv: TransformValues) -> float:
    """Derivative of the asymptotic bias in the per-sample shift."""
    mu = inp.nu_c.atoms
    d = 1.0 + tv.m * mu
    mean = np.mean
    inner = (
        2 * mean(mu**2 * tv.m_z / d**2)
        - mean(mu * tv.m_rho_z / d**2)
        + 2 * mean(mu**2 * (tv.m_rho * tv.m_z + tv.m_z) / d**3)
        - 2 * mean(mu**3 * tv.m * tv.m_z / d**3)
    )
    return float((1.0 - inp.kappa) * mu.size / 2.0 * inner)


def variance_derivative(inp: RmtInput, tv: TransformValues) -> float:
    """Derivative of the asymptotic variance in the per-sample shift."""
    return float(inp.sigma2 / 2.0 * (-tv.m * tv.m_zz + 2 * tv.m_z**2) / tv.m**3)


def initializer_derivative(inp: RmtInput, tv: TransformValues) -> float:
    """Derivative of the weighted initializer terms in the per-sample shift."""
    dof = inp.n_init - inp.r - 1
    sig = inp.sigma_s
    m, m_z, m_zz = tv.m, tv.m_z, tv.m_zz
    d = 1.0 + m * sig
    t_u = np.sum(1.0 / d**2)
    dt_u = 2.0 * m_z * np.sum(sig / d**3)
    dt_x = -m_z * np.sum(sig * (1.0 - m * sig) / d**3)
    inv_stab = m_z / m**2
    d_inv_stab = -(m_zz / m**2 - 2.0 * m_z**2 / m**3)
    leak = (1.0 - inp.kappa) * np.sum(inp.nu_c.atoms)
    fold = (leak + inp.sigma2) * (dt_u * inv_stab + t_u * d_inv_stab) / dof
    cross = 2.0 * (leak + inp.sigma2) * dt_x / dof
    # weights: 1/4 on each of two fold terms, 1/2 on the cross terms
    return float(0.5 * fold + 0.5 * cross)


def risk_derivative(inp: RmtInput, finite_rank: bool = True, tv: TransformValues | None = None) -> float:
    """``d total / d lam`` assembled from the closed-form derivative terms."""
    tv = transform_partials(inp, check=False) if tv is None else tv
    per_shift = bias_derivative(inp, tv) + variance_derivative(inp, tv)
    if finite_rank:
        per_shift += initializer_derivative(inp, tv)
    return per_shift / inp.n_fold


# -- optimal lambda ------------------------------------------------------------------

@dataclass(frozen=True)
class OptimalLambda:
    lambda_star: float
    risk_at_star: float
    edge: str | None
    stationarity_residual: float
    curvature: float

    @property
    def interior(self) -> bool:
        return self.edge is None

    @property
    def certified(self) -> bool:
        """Stationarity residual within 1e-3 of the local curvature scale."""
        return self.edge is not None or self.stationarity_residual <= 1e-3 * self.curvature


def _golden(f, a, b, tol):
    invphi = (math.sqrt(5) - 1) / 2
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def optimal_lambda(inp: RmtInput, lambda_bracket=(1e-3, 1e7), finite_rank: bool = True,
                   grid_points: int = 81, log_tol: float = 1e-7) -> OptimalLambda:
    """Minimize the theoretical risk over ``lam`` by golden-section search in ``log lam``.

    A coarse log-grid locates the basin first. The returned certificate
    compares ``|lam dR/dlam|`` at the optimum with the curvature
    ``|d^2 R / d(log lam)^2|``; a minimum on the bracket edge emits a
    :class:`BracketWarning`.
    """
    lo, hi = map(float, lambda_bracket)
    if not 0 < lo < hi:
        raise ParameterError("bracket must satisfy 0 < lo < hi")
    risk = lambda t: theoretical_risk(inp.with_lambda(math.exp(t)), finite_rank).total  # noqa: E731
    ts = np.linspace(math.log(lo), math.log(hi), grid_points)
    values = np.array([risk(t) for t in ts])
    i = int(np.argmin(values))
    a, b = ts[max(i - 1, 0)], ts[min(i + 1, grid_points - 1)]
    t_star, r_star = _golden(risk, a, b, log_tol)
    edge = None
    if t_star - ts[0] < 10 * log_tol:
        edge = "lower"
    elif ts[-1] - t_star < 10 * log_tol:
        edge = "upper"
    lam_star = math.exp(t_star)
    star = inp.with_lambda(lam_star)
    slope = lam_star * risk_derivative(star, finite_rank)
    h = 1e-3
    curvature = abs(
        (math.exp(t_star + h) * risk_derivative(inp.with_lambda(math.exp(t_star + h)), finite_rank)
         - math.exp(t_star - h) * risk_derivative(inp.with_lambda(math.exp(t_star - h)), finite_rank)) / (2 * h)
    )
    if edge is not None:
        warnings.warn(f"risk minimum at the {edge} edge of [{lo:g}, {hi:g}]", BracketWarning, stacklevel=2)
    return OptimalLambda(lam_star, float(r_star), edge, abs(slope), curvature)


# -- ridge baseline --------------------------------------------------------------------

def ridge_theoretical_risk(sigma_s, sigma_c, n, kappa, sigma2, lam) -> float:
    """Deterministic-equivalent risk of ridge fitted on all ``n`` samples."""
    sigma_s = np.asarray(sigma_s, dtype=float)
    sigma_c = np.asarray(sigma_c, dtype=float)
    eigs = np.concatenate([sigma_s, sigma_c])
    m, _ = _solve(eigs, n, lam / n)
    s2, _ = _moments(m, eigs, n)
    inv_stab = 1.0 / (1.0 - m**2 * s2)
    bias = kappa * np.sum(sigma_s / (1 + m * sigma_s) ** 2) + (1 - kappa) * np.sum(sigma_c / (1 + m * sigma_c) ** 2)
    return float(bias * inv_stab + sigma2 * (inv_stab - 1.0))


def optimal_ridge_lambda(sigma_s, sigma_c, n, kappa, sigma2, lambda_bracket=(1e-3, 1e7), grid_points=81):
    lo, hi = map(float, lambda_bracket)
    f = lambda t: ridge_theoretical_risk(sigma_s, sigma_c, n, kappa, sigma2, math.exp(t))  # noqa: E731
    ts = np.linspace(math.log(lo), math.log(hi), grid_points)
    i = int(np.argmin([f(t) for t in ts]))
    t_star, r_star = _golden(f, ts[max(i - 1, 0)], ts[min(i + 1, grid_points - 1)], 1e-6)
    return math.exp(t_star), float(r_star)


def pcr_oracle_risk(sigma_s, sigma_c, n, kappa, sigma2) -> float:
    """Risk of least squares on the true signal subspace with ``n`` samples."""
    r = np.asarray(sigma_s).size
    if n - r - 1 <= 0:
        return float("inf")
    leak = (1 - kappa) * float(np.sum(sigma_c))
    return leak + (leak + sigma2) * r / (n - r - 1)
