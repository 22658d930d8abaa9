"""Calibrated principal component regression with random-matrix risk theory."""

from .cpcr import CpcrConfig, CpcrFit, SplitPlan, cpcr_fit, predict, split
from .decomposition import RiskDecomposition
from .estimators import GlmFamily, centered_ridge_fit, glm_calibrated_fit, pcr_fit, plsr_fit, ridge_fit
from .rmt import RmtInput, optimal_lambda, theoretical_risk
from .spectral import OrthonormalBasis, estimate_subspace, predictive_power, projector

__all__ = [
    "CpcrConfig",
    "CpcrFit",
    "GlmFamily",
    "OrthonormalBasis",
    "RiskDecomposition",
    "RmtInput",
    "SplitPlan",
    "centered_ridge_fit",
    "cpcr_fit",
    "estimate_subspace",
    "glm_calibrated_fit",
    "optimal_lambda",
    "pcr_fit",
    "plsr_fit",
    "predict",
    "predictive_power",
    "projector",
    "ridge_fit",
    "split",
    "theoretical_risk",
]
