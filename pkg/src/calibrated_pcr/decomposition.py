from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

WEIGHTS = {"bias_1": 0.25, "bias_2": 0.25, "bias_cross": 0.5, "var_1": 0.25, "var_2": 0.25, "var_cross": 0.5}


@dataclass(frozen=True)
class RiskDecomposition:
    """Bias/variance split of the averaged estimator's risk.

    ``var_cross`` holds the noise contribution to the covariance between
    the two calibrated fits (each fold's noise enters one fit through the
    calibration step and the other through its initializer). It carries the
    same weight as ``bias_cross``.
    """

    bias_1: float
    bias_2: float
    bias_cross: float
    var_1: float
    var_2: float
    var_cross: float = 0.0
    total: float = float("nan")
    provenance: str = "theoretical"
    replicates: int = 0
    std_error: float = float("nan")

    @classmethod
    def combine(cls, provenance="theoretical", replicates=0, std_error=float("nan"), **parts):
        total = float(sum(WEIGHTS[k] * parts.get(k, 0.0) for k in WEIGHTS))
        parts = {k: float(parts.get(k, 0.0)) for k in WEIGHTS}
        return cls(**parts, total=total, provenance=provenance, replicates=replicates, std_error=std_error)

    @property
    def bias(self) -> float:
        return 0.25 * (self.bias_1 + self.bias_2) + 0.5 * self.bias_cross

    @property
    def variance(self) -> float:
        return 0.25 * (self.var_1 + self.var_2) + 0.5 * self.var_cross

    def as_dict(self):
        d = asdict(self)
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in d.items()}
