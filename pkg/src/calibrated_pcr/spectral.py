"""Principal subspaces, orthogonal projectors and alignment diagnostics.

Data matrices follow the feature-major convention used throughout the
package: ``X`` has shape ``(p, n)`` with one column per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputError

ORTHO_TOL = 1e-9


def _check_finite(X, name="X"):
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise InputError(f"{name} contains NaN or Inf entries")
    return X


def fix_signs(columns):
    """Flip columns so each one's largest-magnitude entry is positive."""
    columns = np.array(columns, dtype=float, copy=True)
    if columns.size == 0:
        return columns
    rows = np.argmax(np.abs(columns), axis=0)
    signs = np.sign(columns[rows, np.arange(columns.shape[1])])
    signs[signs == 0] = 1.0
    return columns * signs


@dataclass(frozen=True)
class OrthonormalBasis:
    """A ``p x k`` matrix with orthonormal columns."""

    columns: np.ndarray

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=float)
        if cols.ndim != 2:
            raise DimensionError("basis must be a 2-D array of shape (p, k)")
        if not np.all(np.isfinite(cols)):
            raise InputError("basis contains NaN or Inf entries")
        gram = cols.T @ cols
        if cols.shape[1] and np.max(np.abs(gram - np.eye(cols.shape[1]))) > ORTHO_TOL:
            raise InputError("basis columns are not orthonormal")
        cols.setflags(write=False)
        object.__setattr__(self, "columns", cols)

    @property
    def p(self) -> int:
        return self.columns.shape[0]

    @property
    def k(self) -> int:
        return self.columns.shape[1]

    def coordinates(self, X):
        """Project feature-major data onto the basis: returns ``B^T X``."""
        return self.columns.T @ np.asarray(X, dtype=float)


@dataclass(frozen=True)
class Projector:
    """Symmetric idempotent ``p x p`` matrix onto the span of a basis."""

    matrix: np.ndarray
    rank: int

    def apply(self, v):
        return self.matrix @ np.asarray(v, dtype=float)

    def complement(self) -> "Projector":
        p = self.matrix.shape[0]
        return Projector(np.eye(p) - self.matrix, p - self.rank)


def as_basis(B) -> OrthonormalBasis:
    if isinstance(B, OrthonormalBasis):
        return B
    return OrthonormalBasis(np.asarray(B, dtype=float))


def estimate_subspace(X, r: int) -> OrthonormalBasis:
    """Top-``r`` left singular vectors of ``X`` with a deterministic sign.

    Columns are ordered by decreasing singular value. When singular values
    tie the solver's order is kept; only the spanned subspace is meaningful
    in that case.
    """
    X = _check_finite(X)
    if X.ndim != 2:
        raise DimensionError("X must be 2-D with shape (p, n)")
    r = int(r)
    if r < 1 or r > min(X.shape):
        raise DimensionError(f"r={r} must lie in [1, min(p, n)={min(X.shape)}]")
    left, _, _ = np.linalg.svd(X, full_matrices=False)
    return OrthonormalBasis(fix_signs(left[:, :r]))


def projector(B) -> Projector:
    basis = as_basis(B)
    cols = basis.columns
    P = cols @ cols.T
    # exact symmetry; rounding in the product can leave ~1e-17 asymmetry
    P = 0.5 * (P + P.T)
    return Projector(P, basis.k)


def predictive_power(gamma, B) -> float:
    """Fraction of the squared norm of ``gamma`` captured by ``span(B)``."""
    gamma = _check_finite(gamma, "gamma").ravel()
    basis = as_basis(B)
    if gamma.shape[0] != basis.p:
        raise DimensionError("gamma and basis have different ambient dimension")
    total = float(gamma @ gamma)
    if total == 0.0:
        raise InputError("predictive power is undefined for a zero vector")
    inside = basis.columns.T @ gamma
    return float(min(1.0, max(0.0, (inside @ inside) / total)))
