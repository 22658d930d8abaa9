"""Experiment definitions behind the command-line subcommands.

Every subcommand expands its resolved configuration into independent
cells, evaluates them (optionally in a process pool) and flattens the
results into long-form report rows in cell order, so the output depends
only on the configuration and the master seed.
"""

from __future__ import annotations

import copy
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rmt
from .cpcr import CpcrConfig, cpcr_fit
from .datasets import (
    apply_standardizer,
    fit_nystrom,
    fit_standardizer,
    flip_labels,
    load_csv,
    load_embeddings,
    synthetic_embeddings,
)
from .errors import AggregateError, ConfigurationError, InputError
from .estimators import GlmFamily, glm_calibrated_fit, pcr_fit, plsr_fit, ridge_fit
from .spectral import estimate_subspace
from .synthgen import EigenSpec, Replicate, Scenario, draw_replicate, empirical_bias_variance, exact_risk

COLUMNS = ("experiment", "scenario", "c", "kappa", "lam", "r", "method", "replicate", "metric", "value",
           "std_error", "status", "note")

# everything a single cell may raise without invalidating the rest of the run
CELL_ERRORS = (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError)

RHO_CONVENTION = (
    "rho shifts the companion equation as 1/m = -z + (1/n_fold) * sum(mu / (1 + mu (m + rho))) over all p "
    "eigenvalues, evaluated at z = -lam/n_fold; partials in rho are taken at rho = 0"
)

DEFAULTS = {
    "theory-vs-mc": {
        "label": "default",
        "seed": 20240501,
        "p": 400,
        "r": 10,
        "sigma2": 1.0,
        "c": [1.25, 2.0, 4.0],
        "kappa": [0.8, 0.9, 0.99],
        "sigma_s": {"uniform": [2.0, 4.0]},
        "sigma_c": {"uniform": [1.0, 3.0]},
        "cov_seed": 0,
        "kappa_convention": "prior",
        "lam": "auto",
        "replicates": 20,
        "decompose": False,
    },
    "method-compare": {
        "label": "default",
        "seed": 20240502,
        "p": 400,
        "r": 10,
        "c": 2.0,
        "sigma2": 1.0,
        "sweep": "kappa",
        "kappa": [0.5, 0.7, 0.9, 0.95, 0.99, 0.999],
        "sigma_s": {"uniform": [2.0, 4.0]},
        "sigma_c": {"uniform": [1.0, 3.0]},
        "sigma_c_means": [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        "sigma_c_variance": 1.0 / 3.0,
        "cov_seed": 0,
        "kappa_convention": "prior",
        "basis": "oracle",
        "replicates": 10,
        "methods": {"cpcr": {"lam": "auto"}, "pcr": {}, "ridge": {"lam": "auto"}},
    },
    "rank-sweep": {
        "label": "default",
        "seed": 20240503,
        "p": 400,
        "r": 20,
        "c": 1.2,
        "kappa": 0.98,
        "sigma2": 1.0,
        "sigma_s": {"uniform": [2.0, 4.0]},
        "sigma_c": {"uniform": [0.0, 1.0]},
        "cov_seed": 0,
        "kappa_convention": "prior",
        "ranks": list(range(1, 21)),
        "replicates": 10,
        "methods": {"cpcr": {"lam": {"holdout": [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0]}}, "pcr": {}},
    },
    "lambda-map": {
        "label": "default",
        "seed": 0,
        "p": 400,
        "r": 10,
        "c": 2.0,
        "sigma2": 1.0,
        "sigma_s": {"uniform": [2.0, 4.0]},
        "sigma_c": {"uniform": [1.0, 3.0]},
        "cov_seed": 0,
        "kappa_convention": "prior",
        "kappa": [0.5, 0.7, 0.9, 0.99, 0.995, 0.999],
        "lam_grid": {"log10_min": -3.0, "log10_max": 7.0, "points": 41},
    },
    "uci-bench": {
        "label": "default",
        "seed": 20240505,
        "datasets": [],
        "splits": 5,
        "train_fraction": 0.5,
        "components": 5,
        "nystrom": {"landmarks": "train", "bandwidth": "median"},
        "lam_grid": [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0],
        "holdout_fraction": 0.2,
    },
    "classify": {
        "label": "default",
        "seed": 20240506,
        "embeddings": None,
        "n_train": 400,
        "n_test": 4000,
        "flip_fraction": 0.2,
        "r": 8,
        "seeds": [0, 1, 2, 3, 4],
        "generator": {"d": 768, "n_classes": 7, "mean_rank": 6, "mean_scale": 5.0, "spike_rank": 8,
                      "spike_var": 8.0, "noise_var": 1.0, "aligned_fraction": 0.5},
        "lam_grid": [0.1, 1.0, 10.0, 100.0, 1000.0],
        "holdout_fraction": 0.2,
        "init_penalty": 1e-3,
    },
}

MANIFEST = {
    "theory-vs-mc": [
        "Theory versus simulation: x = c, y = value, one curve per kappa.",
        "  empirical points: metric == 'empirical_risk' (error bars: std_error)",
        "  theory curves:    metric == 'theoretical_risk'",
        f"  transform convention: {RHO_CONVENTION}",
    ],
    "method-compare": [
        "Method comparison: one curve per method, metric == 'risk', replicate == 'mean'.",
        "  kappa sweep: x = kappa. Spectrum sweep: x = scenario (sigma_c mean), kappa column fixed.",
        "  error bars: std_error",
    ],
    "rank-sweep": [
        "Rank misspecification: x = r (retained components), y = value for metric == 'risk',",
        "  replicate == 'mean', one curve per method; metric == 'max_min_ratio' summarizes flatness.",
    ],
    "lambda-map": [
        "Lambda landscape heat map: x = kappa, y = log10(lam), colour = value for metric == 'normalized_risk'.",
        "  overlay curve: metric == 'lambda_star' (value = optimal lam per kappa)",
    ],
    "uci-bench": [
        "Regression benchmark table: rows = scenario (dataset) x method,",
        "  cells = value +/- std_error for metric in ('rmse', 'r2'), replicate == 'mean' (std_error holds the SD).",
    ],
    "classify": [
        "Classification table: rows = method, cell = value for metric == 'accuracy', replicate == 'mean'.",
    ],
}


# -- configuration ----------------------------------------------------------------------------

def resolve_config(subcommand, user=None, seed=None):
    """Merge ``user`` over the defaults; unknown keys are rejected."""
    if subcommand not in DEFAULTS:
        raise ConfigurationError(f"unknown subcommand {subcommand!r}")
    cfg = copy.deepcopy(DEFAULTS[subcommand])
    for key, value in (user or {}).items():
        if key not in cfg:
            raise ConfigurationError(f"{subcommand}: unknown config key {key!r}")
        cfg[key] = value
    if seed is not None:
        cfg["seed"] = int(seed)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigurationError("seed must be a non-negative integer")
    for key in ("replicates", "splits"):
        if key in cfg and int(cfg[key]) < 1:
            raise ConfigurationError(f"{key} must be at least 1")
    return cfg


# -- rows ---------------------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    experiment: str
    scenario: str
    metric: str
    value: float | None
    std_error: float | None = None
    c: float | None = None
    kappa: float | None = None
    lam: float | None = None
    r: int | None = None
    method: str = ""
    replicate: str = "mean"
    status: str = "ok"
    note: str = ""

    def cells(self):
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, (bool, np.bool_)):
                return str(int(v))
            if isinstance(v, (int, np.integer)):
                return str(int(v))
            if isinstance(v, (float, np.floating)):
                if not math.isfinite(float(v)):
                    return ""
                return repr(float(v))
            return str(v)

        d = self.__dict__
        return [fmt(d[k]) for k in COLUMNS]


@dataclass
class Report:
    subcommand: str
    config: dict
    rows: list

    @property
    def failed(self):
        return [r for r in self.rows if r.status == "failed"]

    def select(self, **match):
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]


def _fail(base: dict, metric, exc):
    return ReportRow(**base, metric=metric, value=None, status="failed", note=f"{type(exc).__name__}: {exc}")


def _se(values):
    values = np.asarray(values, dtype=float)
    return float(np.std(values, ddof=1) / np.sqrt(values.size)) if values.size > 1 else None


def _sd(values):
    values = np.asarray(values, dtype=float)
    return float(np.std(values, ddof=1)) if values.size > 1 else 0.0


# -- lambda policies -----------------------------------------------------------------------------

def holdout_split(n, fraction, seed):
    idx = np.random.default_rng(seed).permutation(n)
    h = max(1, int(round(fraction * n)))
    return np.sort(idx[h:]), np.sort(idx[:h])


def select_by_holdout(fit, score, X, y, grid, seed, fraction=0.2):
    """Best grid value by holdout score (higher is better; ties go to the earlier value)."""
    train, valid = holdout_split(X.shape[1], fraction, seed)
    best, best_score = None, -np.inf
    errors = []
    for lam in grid:
        try:
            s = score(fit(X[:, train], y[train], lam), X[:, valid], y[valid])
        except CELL_ERRORS as exc:
            errors.append(exc)
            continue
        if s > best_score:
            best, best_score = float(lam), s
    if best is None:
        raise AggregateError("every holdout fit failed", errors)
    return best


def _neg_mse(coef, X, y):
    return -float(np.mean((X.T @ coef - y) ** 2))


def _policy(spec):
    if spec == "auto":
        return ("auto", None)
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        if not spec > 0:
            raise ConfigurationError("fixed lam must be positive")
        return ("fixed", float(spec))
    if isinstance(spec, dict) and "holdout" in spec:
        grid = [float(v) for v in spec["holdout"]]
        if not grid or min(grid) <= 0:
            raise ConfigurationError("holdout grid must be non-empty and positive")
        return ("holdout", grid)
    raise ConfigurationError(f"cannot interpret lam policy {spec!r}")


# -- synthetic cells -------------------------------------------------------------------------------

def _scenario(cfg, c, kappa, sigma_c=None, r=None):
    return Scenario.from_aspect(
        int(cfg["p"]), float(c), r=int(r or cfg["r"]), kappa=float(kappa), sigma2=float(cfg["sigma2"]),
        spec_s=EigenSpec.parse(cfg["sigma_s"]), spec_c=EigenSpec.parse(sigma_c or cfg["sigma_c"]),
        cov_seed=int(cfg["cov_seed"]), kappa_convention=cfg.get("kappa_convention", "prior"),
    )


def _rmt_input(sc: Scenario, lam=1.0):
    cov = sc.covariance()
    return rmt.RmtInput.from_spectra(cov.sigma_s, cov.sigma_c, sc.n, sc.mixing_weight, sc.sigma2, lam)


def _auto_lambda(sc: Scenario, method):
    cov = sc.covariance()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", rmt.BracketWarning)
        if method == "cpcr":
            opt = rmt.optimal_lambda(_rmt_input(sc))
            lam, note = opt.lambda_star, opt.edge
        else:
            lam = rmt.optimal_ridge_lambda(cov.sigma_s, cov.sigma_c, sc.n, sc.mixing_weight, sc.sigma2)[0]
            note = ""
    if caught and not note:
        note = "edge"
    return float(lam), (f"bracket edge: {note}" if note else "")


def _cell_theory_vs_mc(cfg, c, kappa):
    sc = _scenario(cfg, c, kappa)
    base = dict(experiment="theory-vs-mc", scenario=f"c={c},kappa={kappa}", c=float(c), kappa=float(kappa),
                r=sc.r, method="cpcr")
    rows = []
    try:
        policy, value = _policy(cfg["lam"])
        if policy == "holdout":
            raise ConfigurationError("theory-vs-mc needs a fixed or auto lam")
        lam, note = _auto_lambda(sc, "cpcr") if policy == "auto" else (value, "")
    except CELL_ERRORS as exc:
        return [_fail(base, "lambda", exc)]
    base["lam"] = lam
    rows.append(ReportRow(**base, metric="lambda", value=lam, note=note))
    risks, realized = [], []
    for i in range(int(cfg["replicates"])):
        rep = draw_replicate(sc, cfg["seed"], i)
        try:
            cpcr = CpcrConfig(r=sc.r, lam=lam, subspace_source="oracle", basis=rep.cov.U, seed=rep.split_seed)
            risk = exact_risk(cpcr_fit(rep.X, rep.y, cpcr).gamma_cpcr, rep.truth.gamma_star, rep.cov)
        except CELL_ERRORS as exc:
            rows.append(_fail({**base, "replicate": str(i)}, "risk", exc))
            continue
        risks.append(risk)
        realized.append(rep.truth.realized_kappa)
        rows.append(ReportRow(**base, replicate=str(i), metric="risk", value=risk))
    if risks:
        rows.append(ReportRow(**base, metric="empirical_risk", value=float(np.mean(risks)), std_error=_se(risks)))
        rows.append(ReportRow(**base, metric="realized_kappa", value=float(np.mean(realized)),
                              std_error=_se(realized)))
    else:
        rows.append(_fail(base, "empirical_risk", AggregateError("no replicate succeeded")))
    w = sc.mixing_weight
    rows.append(ReportRow(**base, metric="prior_weight", value=w))
    rows.append(ReportRow(**base, metric="expected_kappa_ratio", value=w * sc.r / (w * sc.r + (1 - w) * (sc.p - sc.r))))
    try:
        th = rmt.theoretical_risk(_rmt_input(sc, lam), check=True)
        for metric, v in (("theoretical_risk", th.total), ("theoretical_bias", th.bias),
                          ("theoretical_variance", th.variance)):
            rows.append(ReportRow(**base, metric=metric, value=v, note="provenance=theoretical"))
    except CELL_ERRORS as exc:
        rows.append(_fail(base, "theoretical_risk", exc))
    if cfg.get("decompose") and int(cfg["replicates"]) >= 2:
        try:
            emp = empirical_bias_variance(sc, lam, int(cfg["replicates"]), cfg["seed"])
            rows.append(ReportRow(**base, metric="empirical_bias", value=emp.bias))
            rows.append(ReportRow(**base, metric="empirical_variance", value=emp.variance))
        except CELL_ERRORS as exc:
            rows.append(_fail(base, "empirical_bias", exc))
    return rows


def _fit_method(method, lam_spec, rep: Replicate, sc, basis_source, r=None, seed=0, auto=None):
    """Return ``(coefficients, lam)`` for one synthetic replicate."""
    X, y = rep.X, rep.y
    r = r or sc.r
    if method == "pcr":
        basis = rep.cov.U if basis_source == "oracle" else None
        return pcr_fit(X, y, r=r, basis=basis)[0], None
    policy, value = _policy(lam_spec)
    if method == "ridge":
        def fit(A, b, lam):
            return ridge_fit(A, b, lam)
    elif method == "cpcr":
        source = "oracle" if basis_source == "oracle" else "per_fold"

        def fit(A, b, lam):
            basis = rep.cov.U if source == "oracle" else None
            cfg = CpcrConfig(r=r, lam=lam, subspace_source=source, basis=basis, seed=rep.split_seed)
            return cpcr_fit(A, b, cfg).gamma_cpcr
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    if policy == "auto":
        lam = auto
    elif policy == "fixed":
        lam = value
    else:
        lam = select_by_holdout(fit, _neg_mse, X, y, value, rep.aux_seed)
    return fit(X, y, lam), lam


def _method_rows(base, sc, methods, cfg, basis_source, r=None):
    rows = []
    autos = {}
    for method, spec in methods.items():
        if method != "pcr" and spec.get("lam") == "auto":
            if basis_source != "oracle" or (r is not None and r != sc.r):
                rows.append(_fail({**base, "method": method}, "risk",
                                  ConfigurationError("auto lam needs the oracle basis at the true rank")))
                continue
            try:
                autos[method] = _auto_lambda(sc, method)
            except CELL_ERRORS as exc:
                rows.append(_fail({**base, "method": method}, "risk", exc))
    per = {m: [] for m in methods}
    lams = {m: [] for m in methods}
    for i in range(int(cfg["replicates"])):
        rep = draw_replicate(sc, cfg["seed"], i)
        for method, spec in methods.items():
            if method != "pcr" and spec.get("lam") == "auto" and method not in autos:
                continue
            mbase = {**base, "method": method, "replicate": str(i)}
            try:
                coef, lam = _fit_method(method, spec.get("lam"), rep, sc, basis_source, r,
                                        auto=autos.get(method, (None,))[0])
                risk = exact_risk(coef, rep.truth.gamma_star, rep.cov)
            except CELL_ERRORS as exc:
                rows.append(_fail(mbase, "risk", exc))
                continue
            per[method].append(risk)
            lams[method].append(lam)
            rows.append(ReportRow(**{**mbase, "lam": lam}, metric="risk", value=risk))
    for method in methods:
        vals = per[method]
        mbase = {**base, "method": method}
        if not vals:
            continue
        lam_vals = [v for v in lams[method] if v is not None]
        lam = float(np.exp(np.mean(np.log(lam_vals)))) if lam_vals else None
        note = autos.get(method, (None, ""))[1]
        rows.append(ReportRow(**{**mbase, "lam": lam}, metric="risk", value=float(np.mean(vals)),
                              std_error=_se(vals), note=note))
    return rows


def _cell_method_compare(cfg, point):
    methods = cfg["methods"]
    if cfg["sweep"] == "kappa":
        sc = _scenario(cfg, cfg["c"], point)
        label = f"kappa={point}"
    else:
        half = math.sqrt(3.0 * float(cfg["sigma_c_variance"]))
        low = float(point) - half
        if low < 0:
            raise ConfigurationError("sigma_c mean too small for the requested variance")
        kappa = cfg["kappa"] if not isinstance(cfg["kappa"], list) else cfg["kappa"][0]
        sc = _scenario(cfg, cfg["c"], kappa, sigma_c={"uniform": [low, float(point) + half]})
        label = f"sigma_c_mean={point}"
    base = dict(experiment="method-compare", scenario=label, c=sc.c, kappa=sc.kappa, r=sc.r)
    return _method_rows(base, sc, methods, cfg, cfg["basis"])


def _cell_rank_sweep(cfg, rank):
    sc = _scenario(cfg, cfg["c"], cfg["kappa"])
    base = dict(experiment="rank-sweep", scenario=f"rank={rank}", c=sc.c, kappa=sc.kappa, r=int(rank))
    return _method_rows(base, sc, cfg["methods"], cfg, "estimated", r=int(rank))


def _rank_summary(rows, methods):
    out = []
    for method in methods:
        means = [r.value for r in rows if r.method == method and r.metric == "risk" and r.replicate == "mean"]
        base = dict(experiment="rank-sweep", scenario="all", method=method)
        if len(means) >= 1 and min(means) > 0:
            out.append(ReportRow(**base, metric="max_min_ratio", value=max(means) / min(means)))
        else:
            out.append(_fail(base, "max_min_ratio", AggregateError("no successful rank cells")))
    return out


def lambda_grid(spec):
    return np.logspace(float(spec["log10_min"]), float(spec["log10_max"]), int(spec["points"]))


def _cell_lambda_map(cfg, kappa):
    sc = _scenario(cfg, cfg["c"], kappa)
    base = dict(experiment="lambda-map", scenario=f"kappa={kappa}", c=sc.c, kappa=float(kappa), r=sc.r)
    grid = lambda_grid(cfg["lam_grid"])
    inp = _rmt_input(sc)
    rows = []
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", rmt.BracketWarning)
            opt = rmt.optimal_lambda(inp, (float(grid[0]), float(grid[-1])))
        risks = np.array([rmt.theoretical_risk(inp.with_lambda(l)).total for l in grid])
    except CELL_ERRORS as exc:
        return [_fail(base, "lambda_star", exc)]
    lam_star, r_star = opt.lambda_star, opt.risk_at_star
    j = int(np.argmin(risks))
    if risks[j] < r_star:
        lam_star, r_star = float(grid[j]), float(risks[j])
    note = f"bracket edge: {opt.edge}" if opt.edge else ""
    rows.append(ReportRow(**base, lam=lam_star, metric="lambda_star", value=lam_star, note=note))
    rows.append(ReportRow(**base, lam=lam_star, metric="risk_at_lambda_star", value=r_star))
    rows.append(ReportRow(**base, lam=lam_star, metric="normalized_risk", value=1.0, note="lambda_star trace"))
    rows.append(ReportRow(**base, lam=lam_star, metric="stationarity_residual", value=opt.stationarity_residual))
    rows.append(ReportRow(**base, lam=lam_star, metric="curvature_scale", value=opt.curvature))
    for lam, risk in zip(grid, risks):
        rows.append(ReportRow(**base, lam=float(lam), metric="normalized_risk", value=float(risk / r_star)))
    return rows


# -- UCI benchmark --------------------------------------------------------------------------------

def _r2(pred, y):
    ss = float(np.sum((y - np.mean(y)) ** 2))
    return 1.0 - float(np.sum((y - pred) ** 2)) / ss if ss > 0 else float("nan")


def _uci_split(ds, cfg, split_seed):
    n = ds.n
    idx = np.random.default_rng(split_seed).permutation(n)
    n_train = max(4, int(round(float(cfg["train_fraction"]) * n)))
    if n_train >= n:
        raise ConfigurationError("train_fraction leaves no test rows")
    train, test = ds.subset(np.sort(idx[:n_train])), ds.subset(np.sort(idx[n_train:]))
    record = fit_standardizer(train)
    train, test = apply_standardizer(train, record), apply_standardizer(test, record)
    ny = cfg["nystrom"]
    m = train.n if ny.get("landmarks", "train") == "train" else int(ny["landmarks"])
    nmap = fit_nystrom(train.features, m, ny.get("bandwidth", "median"), split_seed)
    phi_tr, phi_te = nmap.transform(train.features), nmap.transform(test.features)
    center = phi_tr.mean(axis=1, keepdims=True)
    Xtr = np.vstack([train.features.T, phi_tr - center])
    Xte = np.vstack([test.features.T, phi_te - center])
    return Xtr, train.target, Xte, test.target


def _cell_uci(cfg, entry):
    name = entry.get("name") or Path(entry["path"]).stem
    base = dict(experiment="uci-bench", scenario=name, r=int(cfg["components"]))
    path = Path(entry["path"])
    if not path.is_file():
        return [ReportRow(**base, metric="dataset", value=None, status="skipped", note=f"missing file {path}")]
    try:
        ds = load_csv(path, entry["target"], entry.get("delimiter", ","), tuple(entry.get("drop", ())))
    except CELL_ERRORS as exc:
        return [_fail(base, "dataset", exc)]
    k = int(cfg["components"])
    scores = {m: {"rmse": [], "r2": []} for m in ("pcr", "plsr", "cpcr")}
    rows = []
    for s in range(int(cfg["splits"])):
        split_seed = int(np.random.SeedSequence([cfg["seed"], s]).generate_state(1)[0])
        try:
            Xtr, ytr, Xte, yte = _uci_split(ds, {**cfg, **{k: entry[k] for k in ("train_fraction",) if k in entry}},
                                            split_seed)
        except CELL_ERRORS as exc:
            rows.append(_fail({**base, "replicate": str(s)}, "split", exc))
            continue
        for method in scores:
            mbase = {**base, "method": method, "replicate": str(s), "c": Xtr.shape[0] / Xtr.shape[1]}
            try:
                lam = None
                if method == "pcr":
                    coef = pcr_fit(Xtr, ytr, r=k)[0]
                elif method == "plsr":
                    coef = plsr_fit(Xtr, ytr, k)
                else:
                    def fit(A, b, lam):
                        return cpcr_fit(A, b, CpcrConfig(r=k, lam=lam, seed=split_seed)).gamma_cpcr

                    lam = select_by_holdout(fit, _neg_mse, Xtr, ytr, cfg["lam_grid"], split_seed,
                                            float(cfg["holdout_fraction"]))
                    coef = fit(Xtr, ytr, lam)
                pred = Xte.T @ coef
            except CELL_ERRORS as exc:
                rows.append(_fail(mbase, "rmse", exc))
                continue
            rmse = float(np.sqrt(np.mean((pred - yte) ** 2)))
            r2 = _r2(pred, yte)
            scores[method]["rmse"].append(rmse)
            scores[method]["r2"].append(r2)
            rows.append(ReportRow(**mbase, lam=lam, metric="rmse", value=rmse))
            rows.append(ReportRow(**mbase, lam=lam, metric="r2", value=r2))
    for method, mets in scores.items():
        for metric, vals in mets.items():
            mbase = {**base, "method": method}
            if vals:
                rows.append(ReportRow(**mbase, metric=metric, value=float(np.mean(vals)), std_error=_sd(vals),
                                      note="std_error column holds the SD over splits"))
            else:
                rows.append(_fail(mbase, metric, AggregateError("no split succeeded")))
    return rows


# -- classification ---------------------------------------------------------------------------------

def _accuracy(coef, X, y):
    return float(np.mean(np.argmax(X.T @ coef, axis=1) == y))


def _classify_data(cfg, seed):
    n_train, n_test = int(cfg["n_train"]), int(cfg["n_test"])
    emb = cfg["embeddings"]
    if emb:
        train = load_embeddings(emb["train"])
        test = load_embeddings(emb["test"])
        k = max(train.n_classes, test.n_classes)
    else:
        g = cfg["generator"]
        data = synthetic_embeddings(n_train + n_test, seed=seed, **g)
        train, test = data.subset(np.arange(n_train)), data.subset(np.arange(n_train, n_train + n_test))
        k = data.n_classes
    if k < 2:
        raise InputError("classification needs at least two classes")
    return train, test, k


def _cell_classify(cfg, seed):
    base = dict(experiment="classify", scenario=f"seed={seed}", r=int(cfg["r"]), replicate=str(seed))
    try:
        train, test, k = _classify_data(cfg, seed)
    except CELL_ERRORS as exc:
        return [_fail(base, "accuracy", exc)]
    fam = GlmFamily.multinomial(k)
    ytr = flip_labels(train.labels, float(cfg["flip_fraction"]), seed=seed + 7919, n_classes=k)
    center = train.features.mean(axis=1, keepdims=True)
    Xtr, Xte = train.features - center, test.features - center
    r = int(cfg["r"])
    basis = estimate_subspace(np.hstack([Xtr, Xte]), r)
    grid, frac = cfg["lam_grid"], float(cfg["holdout_fraction"])
    rows = []

    def fit_lr(A, b, lam):
        return glm_calibrated_fit(A, b, lam, None, fam).coefficients

    def fit_cpcr(A, b, lam):
        conf = CpcrConfig(r=r, lam=lam, family=fam, subspace_source="oracle", basis=basis, seed=seed,
                          init_penalty=float(cfg["init_penalty"]))
        return cpcr_fit(A, b, conf).gamma_cpcr

    for method in ("lr", "pcr", "cpcr"):
        try:
            lam = None
            if method == "pcr":
                coef = pcr_fit(Xtr, ytr, basis=basis, family=fam, init_penalty=float(cfg["init_penalty"]))[0]
            else:
                fit = fit_lr if method == "lr" else fit_cpcr
                lam = select_by_holdout(fit, _accuracy, Xtr, ytr, grid, seed, frac)
                coef = fit(Xtr, ytr, lam)
            acc = _accuracy(coef, Xte, test.labels)
        except CELL_ERRORS as exc:
            rows.append(_fail({**base, "method": method}, "accuracy", exc))
            continue
        rows.append(ReportRow(**base, method=method, lam=lam, metric="accuracy", value=acc))
    return rows


def _classify_summary(rows):
    out = []
    for method in ("lr", "pcr", "cpcr"):
        vals = [r.value for r in rows if r.method == method and r.metric == "accuracy" and r.status == "ok"]
        if vals:
            out.append(ReportRow(experiment="classify", scenario="all", method=method, metric="accuracy",
                                 value=float(np.mean(vals)), std_error=_se(vals)))
    return out


# -- dispatch ----------------------------------------------------------------------------------------

def _cells(subcommand, cfg):
    if subcommand == "theory-vs-mc":
        return [(_cell_theory_vs_mc, (c, k)) for c in cfg["c"] for k in cfg["kappa"]]
    if subcommand == "method-compare":
        if cfg["sweep"] == "kappa":
            points = cfg["kappa"] if isinstance(cfg["kappa"], list) else [cfg["kappa"]]
        elif cfg["sweep"] == "sigma_c_mean":
            points = cfg["sigma_c_means"]
        else:
            raise ConfigurationError("sweep must be 'kappa' or 'sigma_c_mean'")
        return [(_cell_method_compare, (pt,)) for pt in points]
    if subcommand == "rank-sweep":
        return [(_cell_rank_sweep, (k,)) for k in cfg["ranks"]]
    if subcommand == "lambda-map":
        return [(_cell_lambda_map, (k,)) for k in cfg["kappa"]]
    if subcommand == "uci-bench":
        if not cfg["datasets"]:
            raise ConfigurationError("uci-bench needs a 'datasets' list of {name, path, target}")
        return [(_cell_uci, (entry,)) for entry in cfg["datasets"]]
    if subcommand == "classify":
        return [(_cell_classify, (int(s),)) for s in cfg["seeds"]]
    raise ConfigurationError(f"unknown subcommand {subcommand!r}")


def _run_cell(job):
    func, cfg, args = job
    return func(cfg, *args)


def _validate(subcommand, cfg):
    if subcommand in ("method-compare", "rank-sweep"):
        for method, spec in cfg["methods"].items():
            if method not in ("cpcr", "pcr", "ridge"):
                raise ConfigurationError(f"unknown method {method!r}")
            if method != "pcr":
                _policy(spec.get("lam"))
    if subcommand == "theory-vs-mc":
        _policy(cfg["lam"])


def run_experiment(subcommand, config=None, seed=None, workers=1) -> Report:
    """Resolve the configuration, evaluate every cell and return the report."""
    cfg = resolve_config(subcommand, config, seed)
    _validate(subcommand, cfg)
    jobs = [(func, cfg, args) for func, args in _cells(subcommand, cfg)]
    if int(workers) > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=int(workers)) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]
    rows = [row for cell in results for row in cell]
    if subcommand == "rank-sweep":
        rows += _rank_summary(rows, cfg["methods"])
    elif subcommand == "classify":
        rows += _classify_summary(rows)
    return Report(subcommand, cfg, rows)


def manifest_text(subcommand):
    lines = [f"figure manifest for {subcommand}", "columns: " + ",".join(COLUMNS), ""]
    return "\n".join(lines + MANIFEST[subcommand]) + "\n"
