"""Single-pass fitting routines.

All losses are plain sums over samples (no ``1/m`` factor), so a penalty
weight ``lam`` means the same thing here as in the risk formulas of
:mod:`calibrated_pcr.rmt` once it is divided by the fold size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit, logsumexp, softmax

from .errors import ConvergenceError, DimensionError, InputError, ParameterError
from .spectral import as_basis, estimate_subspace

PINV_RCOND = 1e-10
COND_LIMIT = 1e12
FLAT_OBJECTIVE = 1e-10
_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class GlmFamily:
    """Response distribution of the generalized linear model.

    ``kind`` is one of ``"gaussian"``, ``"bernoulli"`` or ``"multinomial"``;
    multinomial families also carry the number of classes.
    """

    kind: str
    n_classes: int | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "bernoulli", "multinomial"):
            raise ParameterError(f"unknown family {self.kind!r}")
        if self.kind == "multinomial":
            if self.n_classes is None or self.n_classes < 2:
                raise ParameterError("multinomial family needs n_classes >= 2")
        elif self.n_classes is not None:
            object.__setattr__(self, "n_classes", None)

    @classmethod
    def gaussian(cls):
        return cls("gaussian")

    @classmethod
    def bernoulli(cls):
        return cls("bernoulli")

    @classmethod
    def multinomial(cls, n_classes):
        return cls("multinomial", int(n_classes))

    @classmethod
    def parse(cls, spec, n_classes=None):
        if isinstance(spec, GlmFamily):
            return spec
        if spec == "multinomial":
            return cls.multinomial(n_classes)
        return cls(spec)

    @property
    def n_outputs(self) -> int:
        """Number of coefficient columns (1 except for multinomial)."""
        return self.n_classes if self.kind == "multinomial" else 1

    @property
    def curvature_bound(self) -> float:
        """Upper bound on the per-sample Hessian of the loss in the logits."""
        return {"gaussian": 2.0, "bernoulli": 0.25, "multinomial": 0.5}[self.kind]

    # -- loss pieces, all in terms of the (m, K) logit matrix ---------------
    def targets(self, y):
        y = np.asarray(y)
        if self.kind == "multinomial":
            labels = y.astype(int).ravel()
            if labels.min() < 0 or labels.max() >= self.n_classes:
                raise InputError("class labels must lie in 0..n_classes-1")
            return np.eye(self.n_classes)[labels]
        if self.kind == "bernoulli":
            yy = y.astype(float).ravel()
            if not np.all((yy == 0) | (yy == 1)):
                raise InputError("bernoulli responses must be 0/1")
            return yy[:, None]
        return y.astype(float).reshape(-1, 1)

    def loss(self, eta, T) -> float:
        if self.kind == "gaussian":
            return float(np.sum((T - eta) ** 2))
        if self.kind == "bernoulli":
            return float(-np.sum(T * log_expit(eta) + (1 - T) * log_expit(-eta)))
        return float(np.sum(logsumexp(eta, axis=1)) - np.sum(T * eta))

    def loss_grad(self, eta, T):
        """Derivative of the summed loss with respect to the logits."""
        if self.kind == "gaussian":
            return 2.0 * (eta - T)
        if self.kind == "bernoulli":
            return expit(eta) - T
        return softmax(eta, axis=1) - T

    def weight_roots(self, eta):
        """Symmetric square roots of the per-sample logit Hessians, ``(m, K, K)``."""
        if self.kind == "gaussian":
            return np.full((eta.shape[0], 1, 1), np.sqrt(2.0))
        if self.kind == "bernoulli":
            s = expit(eta[:, 0])
            return np.sqrt(s * (1 - s))[:, None, None]
        probs = softmax(eta, axis=1)
        W = np.einsum("ia,ab->iab", probs, np.eye(eta.shape[1])) - np.einsum("ia,ib->iab", probs, probs)
        vals, vecs = np.linalg.eigh(W)
        vals = np.sqrt(np.clip(vals, 0.0, None))
        return np.einsum("iac,ic,ibc->iab", vecs, vals, vecs)


GAUSSIAN = GlmFamily.gaussian()


@dataclass
class FitResult:
    coefficients: np.ndarray
    objective_value: float
    iterations: int
    converged: bool
    gradient_norm: float = 0.0
    objective_trace: list = field(default_factory=list)


def _finite(a, name):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise InputError(f"{name} contains NaN or Inf entries")
    return a


def ols_fit(Z, y):
    """Least-squares coefficients of ``y`` on the rows of ``Z`` (shape ``(r, m)``).

    Rank-deficient designs get the minimum-norm minimizer, with singular
    values below ``1e-10`` times the largest treated as zero.
    """
    Z = _finite(Z, "Z")
    y = _finite(y, "y").ravel()
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.shape[1] != y.shape[0]:
        raise DimensionError(f"Z has {Z.shape[1]} samples but y has {y.shape[0]}")
    coef, *_ = np.linalg.lstsq(Z.T, y, rcond=PINV_RCOND)
    return coef


def _check_penalized(X, y, lam, gamma_init):
    X = _finite(X, "X")
    y = _finite(y, "y")
    if X.ndim != 2:
        raise DimensionError("X must have shape (p, m)")
    if y.shape[0] != X.shape[1]:
        raise DimensionError(f"X has {X.shape[1]} samples but y has {y.shape[0]}")
    lam = float(lam)
    if not lam > 0 or not np.isfinite(lam):
        raise ParameterError(f"penalty weight must be positive, got {lam}")
    return X, y, lam


def centered_ridge_fit(X, y, lam, gamma_init=None, method="auto"):
    """Minimize ``||y - X^T g||^2 + lam * ||g - gamma_init||^2`` in closed form.

    The primal route solves the ``p x p`` system; the dual route solves an
    ``m x m`` system through ``g = gamma_init + X (X^T X + lam I)^{-1} (y - X^T gamma_init)``,
    which is what ``method="auto"`` picks when ``p > m``.
    """
    X, y, lam = _check_penalized(X, y, lam, gamma_init)
    y = y.ravel()
    p, m = X.shape
    g0 = np.zeros(p) if gamma_init is None else _finite(gamma_init, "gamma_init").ravel()
    if g0.shape[0] != p:
        raise DimensionError("gamma_init has the wrong length")
    if method == "auto":
        method = "dual" if p > m else "primal"
    if method == "primal":
        A = X @ X.T
        A[np.diag_indices(p)] += lam
        return linalg.solve(A, X @ y + lam * g0, assume_a="pos")
    if method == "dual":
        K = X.T @ X
        K[np.diag_indices(m)] += lam
        return g0 + X @ linalg.solve(K, y - X.T @ g0, assume_a="pos")
    raise ParameterError(f"unknown method {method!r}")


def ridge_fit(X, y, lam, method="auto"):
    """Ordinary ridge regression (penalty centered at zero)."""
    return centered_ridge_fit(X, y, lam, None, method=method)


def _newton_direction(X, roots, grad, lam):
    """Solve ``(2 lam I + sum_i x_i x_i^T (x) W_i) d = -grad`` for ``d`` of shape (p, K).

    Uses the primal Hessian when ``p <= m`` and the Woodbury identity on the
    ``mK``-dimensional dual system otherwise. Returns ``None`` when the
    system's condition estimate exceeds ``COND_LIMIT``.
    """
    p, m = X.shape
    K = grad.shape[1]
    W = np.einsum("iac,ibc->iab", roots, roots)
    if p <= m:
        H = np.einsum("ji,li,iab->jalb", X, X, W).reshape(p * K, p * K)
        data_norm = np.linalg.norm(H)
        if (2 * lam + data_norm) / (2 * lam) > COND_LIMIT:
            return None
        H[np.diag_indices(p * K)] += 2 * lam
        return -linalg.solve(H, grad.reshape(-1), assume_a="pos").reshape(p, K)
    G = X.T @ X
    M = np.einsum("ij,iac,jcb->iajb", G, roots, roots).reshape(m * K, m * K)
    data_norm = np.linalg.norm(M)
    if (2 * lam + data_norm) / (2 * lam) > COND_LIMIT:
        return None
    M[np.diag_indices(m * K)] += 2 * lam
    u = np.einsum("iab,ib->ia", roots, X.T @ grad).reshape(-1)
    v = linalg.solve(M, u, assume_a="pos").reshape(m, K)
    correction = X @ np.einsum("iab,ib->ia", roots, v)
    return -(grad - correction) / (2 * lam)


def glm_calibrated_fit(X, y, lam, gamma_init=None, family=GAUSSIAN, tol=1e-8, max_iter=200):
    """Minimize ``L(y, X^T g) + lam * ||g - gamma_init||^2`` for a GLM loss.

    Damped Newton with step halving; falls back to a gradient step of size
    ``1/Lipschitz`` when the Newton system is too ill-conditioned. The
    gradient tolerance is floored at the level float64 can resolve for the
    problem's scale. Coefficients have shape ``(p,)`` for binary and
    gaussian families and ``(p, K)`` for multinomial ones.
    """
    family = GlmFamily.parse(family)
    X, y, lam = _check_penalized(X, y, lam, gamma_init)
    p, m = X.shape
    K = family.n_outputs
    if gamma_init is None:
        G0 = np.zeros((p, K))
    else:
        G0 = _finite(gamma_init, "gamma_init").reshape(p, K)
    if family.kind == "gaussian":
        coef = centered_ridge_fit(X, y, lam, G0[:, 0])
        eta = X.T @ coef
        obj = float(np.sum((y.ravel() - eta) ** 2) + lam * np.sum((coef - G0[:, 0]) ** 2))
        return FitResult(coef, obj, 0, True, 0.0, [obj])

    T = family.targets(y)
    base = X.T @ G0
    delta = np.zeros((p, K))

    def objective(d, eta):
        return family.loss(eta, T) + lam * float(np.sum(d * d))

    def gradient(d, eta):
        g_data = X @ family.loss_grad(eta, T)
        return g_data + 2 * lam * d, g_data

    eta = base.copy()
    obj = objective(delta, eta)
    trace = [obj]
    x_norm2 = float(np.linalg.norm(X, 2) ** 2)
    lipschitz = 2 * lam + family.curvature_bound * x_norm2
    for it in range(1, max_iter + 1):
        grad, g_data = gradient(delta, eta)
        gnorm = float(np.max(np.abs(grad)))
        scale = float(np.max(np.abs(g_data))) + 2 * lam * float(np.max(np.abs(delta)))
        if gnorm < max(tol, 1e3 * _EPS * scale):
            return _finish(delta, G0, obj, it - 1, True, gnorm, trace, family)
        direction = _newton_direction(X, family.weight_roots(eta), grad, lam)
        if direction is None:
            direction = -grad / lipschitz
        slope = float(np.sum(grad * direction))
        if slope >= 0:
            direction, slope = -grad / lipschitz, -float(np.sum(grad * grad)) / lipschitz
        step = 1.0
        Xd = X.T @ direction
        # near the optimum the predicted decrease drops below the objective's rounding
        # noise; a full step that leaves the objective flat and halves the gradient is taken
        cand, cand_eta = delta + direction, eta + Xd
        cand_obj = objective(cand, cand_eta)
        if obj + 1e-4 * slope < cand_obj <= obj + FLAT_OBJECTIVE * max(1.0, abs(obj)):
            cand_grad, _ = gradient(cand, cand_eta)
            if float(np.max(np.abs(cand_grad))) <= 0.5 * gnorm:
                delta, eta, obj = cand, cand_eta, cand_obj
                trace.append(obj)
                continue
        for _ in range(60):
            cand = delta + step * direction
            cand_eta = eta + step * Xd
            cand_obj = objective(cand, cand_eta)
            if cand_obj <= obj + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            # no representable decrease left: accept only if at the float64 floor
            if gnorm < max(tol, 1e6 * _EPS * scale):
                return _finish(delta, G0, obj, it, True, gnorm, trace, family)
            raise ConvergenceError(
                f"line search stalled with gradient {gnorm:.3e} above tolerance {tol:.1e}",
                last_iterate=_shape_coef(G0 + delta, family),
                iterations=it,
            )
        delta, eta, obj = cand, cand_eta, min(cand_obj, obj)
        trace.append(obj)
    grad, _ = gradient(delta, eta)
    gnorm = float(np.max(np.abs(grad)))
    raise ConvergenceError(
        f"GLM calibration did not converge in {max_iter} iterations (gradient {gnorm:.3e})",
        last_iterate=_shape_coef(G0 + delta, family),
        iterations=max_iter,
    )


def _shape_coef(coef, family):
    return coef if family.kind == "multinomial" else coef[:, 0]


def _finish(delta, G0, obj, iterations, converged, gnorm, trace, family):
    return FitResult(_shape_coef(G0 + delta, family), obj, iterations, converged, gnorm, trace)


def pcr_fit(X, y, r=None, basis=None, family=GAUSSIAN, init_penalty=1e-3):
    """Principal component regression: regress on ``B^T X`` and map back.

    ``basis`` overrides the subspace estimated from ``X`` itself. Gaussian
    responses use least squares; other families use a lightly penalized GLM
    fit (``init_penalty``) so that separable data still has a finite fit.
    Returns ``(coefficients, basis, projected_coefficients)``.
    """
    family = GlmFamily.parse(family)
    X = _finite(X, "X")
    if basis is None:
        if r is None:
            raise ParameterError("pcr_fit needs either r or a basis")
        basis = estimate_subspace(X, r)
    basis = as_basis(basis)
    Z = basis.coordinates(X)
    if family.kind == "gaussian":
        zeta = ols_fit(Z, y)
    else:
        zeta = glm_calibrated_fit(Z, y, init_penalty, None, family).coefficients
    return basis.columns @ zeta, basis, zeta


@dataclass(frozen=True)
class PlsModel:
    coef: np.ndarray
    weights: np.ndarray
    loadings: np.ndarray
    y_loadings: np.ndarray


def pls1(X, y, k):
    """PLS1 by NIPALS with deflation of ``X`` only; ``X`` is ``(p, m)``, both centered."""
    X = _finite(X, "X")
    y = _finite(y, "y").ravel()
    p, m = X.shape
    if y.shape[0] != m:
        raise DimensionError("X and y disagree on the sample count")
    k = int(k)
    if k < 1 or k > min(p, m):
        raise DimensionError(f"k={k} must lie in [1, min(p, m)]")
    if np.var(y) == 0:
        raise InputError("response has zero variance")
    E = X.T.copy()  # samples x features
    W = np.zeros((p, k))
    P = np.zeros((p, k))
    q = np.zeros(k)
    floor = 1e-12 * (np.linalg.norm(E) * np.linalg.norm(y) + 1e-300)
    used = 0
    for a in range(k):
        w = E.T @ y
        norm = np.linalg.norm(w)
        if norm <= floor:
            break
        w /= norm
        t = E @ w
        tt = t @ t
        P[:, a] = E.T @ t / tt
        q[a] = (y @ t) / tt
        W[:, a] = w
        E -= np.outer(t, P[:, a])
        used = a + 1
    if used == 0:
        return PlsModel(np.zeros(p), W, P, q)
    Wu, Pu = W[:, :used], P[:, :used]
    coef = Wu @ np.linalg.solve(Pu.T @ Wu, q[:used])
    return PlsModel(coef, W, P, q)


def plsr_fit(X, y, k):
    """Coefficient vector of a ``k``-component PLS1 fit on centered data."""
    return pls1(X, y, k).coef
