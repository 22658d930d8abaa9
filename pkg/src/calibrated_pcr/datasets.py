"""Tabular and embedding ingestion, standardization, Nystrom features, label noise."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import ConfigurationError, DimensionError, InputError, ParameterError

log = logging.getLogger(__name__)

WHITEN_FLOOR = 1e-10
DEGENERATE_KERNEL = 1e-12
EMBEDDING_MAGIC = b"CPCREMB1"


@dataclass(frozen=True)
class StandardizationRecord:
    """Training-split statistics reused to transform any other split."""

    kept_columns: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    target_mean: float
    target_scale: float

    def transform_features(self, features):
        features = np.asarray(features, dtype=float)
        return (features[:, self.kept_columns] - self.feature_mean) / self.feature_scale

    def transform_target(self, target):
        return (np.asarray(target, dtype=float) - self.target_mean) / self.target_scale

    def inverse_target(self, target):
        return np.asarray(target, dtype=float) * self.target_scale + self.target_mean


@dataclass(frozen=True)
class TabularDataset:
    """Row-major samples (``n x d``) with a numeric target."""

    features: np.ndarray
    target: np.ndarray
    column_names: tuple
    target_name: str = "target"
    record: StandardizationRecord | None = field(default=None, repr=False)

    @property
    def n(self):
        return self.features.shape[0]

    def subset(self, rows):
        rows = np.asarray(rows)
        return replace(self, features=self.features[rows], target=self.target[rows])


def load_csv(path, target_column, delimiter=",", drop=()) -> TabularDataset:
    """Read a headed numeric CSV; ``drop`` names columns (such as row ids) to ignore."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise InputError(f"{path}: need at least two columns")
    if target_column not in header:
        raise InputError(f"{path}: target column {target_column!r} not in header {header}")
    if len(rows) < 2:
        raise InputError(f"{path}: header only, no data rows")
    values = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise InputError(f"{path}: row {i} has {len(row)} fields, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                values[i - 1, j] = float(cell)
            except ValueError:
                raise InputError(f"{path}: unparseable cell {cell!r} at row {i} (line {i + 1}), column {header[j]!r}") from None
    missing = [c for c in drop if c not in header]
    if missing:
        raise InputError(f"{path}: columns to drop not in header: {missing}")
    t = header.index(target_column)
    keep = [j for j in range(len(header)) if j != t and header[j] not in drop]
    return TabularDataset(values[:, keep], values[:, t], tuple(header[j] for j in keep), target_column)


def fit_standardizer(ds: TabularDataset) -> StandardizationRecord:
    """Z-score statistics from ``ds`` alone; constant feature columns are dropped."""
    if ds.n < 2:
        raise InputError("need at least two rows to standardize")
    mean = ds.features.mean(axis=0)
    scale = ds.features.std(axis=0, ddof=1)
    constant = ~(scale > 1e-12 * np.maximum(1.0, np.abs(mean)))
    if constant.any():
        dropped = [ds.column_names[j] for j in np.flatnonzero(constant)]
        log.warning("dropping constant feature columns: %s", ", ".join(map(str, dropped)))
    kept = np.flatnonzero(~constant)
    if kept.size == 0:
        raise InputError("every feature column is constant")
    t_scale = float(ds.target.std(ddof=1))
    if not t_scale > 0:
        raise InputError("target has zero variance")
    return StandardizationRecord(kept, mean[kept], scale[kept], float(ds.target.mean()), t_scale)


def apply_standardizer(ds: TabularDataset, record: StandardizationRecord) -> TabularDataset:
    return TabularDataset(
        record.transform_features(ds.features),
        record.transform_target(ds.target),
        tuple(ds.column_names[j] for j in record.kept_columns),
        ds.target_name,
        record,
    )


def standardize(ds: TabularDataset) -> TabularDataset:
    return apply_standardizer(ds, fit_standardizer(ds))


# -- Nystrom ------------------------------------------------------------------------------------

def rbf_kernel(A, B, bandwidth):
    return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * bandwidth**2))


def median_bandwidth(points):
    if points.shape[0] < 2:
        raise InputError("median heuristic needs at least two points")
    d = pdist(points)
    med = float(np.median(d[d > 0])) if np.any(d > 0) else 0.0
    if not med > 0:
        raise InputError("all points coincide; bandwidth undefined")
    return med


@dataclass(frozen=True)
class NystromMap:
    landmarks: np.ndarray
    bandwidth: float
    whitener: np.ndarray
    seed: int | None = None

    @property
    def m(self):
        return self.landmarks.shape[0]

    def transform(self, rows):
        """Feature-major map ``W k(landmarks, x)`` of shape ``(m, n)``."""
        rows = np.asarray(rows, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != self.landmarks.shape[1]:
            raise DimensionError("rows must be (n, d) with the landmark dimension")
        return self.whitener @ rbf_kernel(self.landmarks, rows, self.bandwidth)


def fit_nystrom(rows, m_landmarks, bandwidth="median", seed=None) -> NystromMap:
    """Distinct landmarks drawn from ``rows``; ``m_landmarks > n`` is rejected."""
    rows = np.asarray(rows, dtype=float)
    n = rows.shape[0]
    m = int(m_landmarks)
    if m < 1:
        raise ParameterError("m_landmarks must be positive")
    if m > n:
        raise ConfigurationError(
            f"m_landmarks={m} exceeds the {n} training rows; landmarks are drawn without replacement, "
            "so this would duplicate landmarks. Use a smaller training fraction with m_landmarks = n instead."
        )
    rng = np.random.default_rng(seed)
    landmarks = rows[np.sort(rng.choice(n, size=m, replace=False))]
    if isinstance(bandwidth, str):
        if bandwidth != "median":
            raise ParameterError(f"unknown bandwidth rule {bandwidth!r}")
        h = median_bandwidth(landmarks)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ParameterError("bandwidth must be positive")
    K = rbf_kernel(landmarks, landmarks, h)
    vals, vecs = np.linalg.eigh(0.5 * (K + K.T))
    top = vals[-1]
    if top < DEGENERATE_KERNEL:
        raise InputError("landmark kernel block is degenerate")
    keep = vals > WHITEN_FLOOR * top
    V = vecs[:, keep]
    whitener = (V / np.sqrt(vals[keep])) @ V.T
    return NystromMap(landmarks, h, whitener, seed)


def nystrom_features(ds, m_landmarks, bandwidth="median", seed=None):
    """Fit a map on ``ds`` and return ``(features, map)``; reuse the map for test rows."""
    rows = ds.features if isinstance(ds, TabularDataset) else np.asarray(ds, dtype=float)
    nmap = fit_nystrom(rows, m_landmarks, bandwidth, seed)
    return nmap.transform(rows), nmap


# -- embeddings ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (p, n)
    labels: np.ndarray
    n_classes: int
    label_names: tuple = ()

    @property
    def n(self):
        return self.labels.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(self, features=self.features[:, idx], labels=self.labels[idx])


def _encode_labels(raw, label_map):
    if label_map is not None:
        try:
            labels = np.array([int(label_map[v]) for v in raw])
        except KeyError as exc:
            raise InputError(f"label {exc.args[0]!r} missing from label map") from None
        names = tuple(sorted(label_map, key=label_map.get))
    else:
        try:
            labels = np.array([int(v) for v in raw])
        except ValueError:
            raise InputError("non-integer labels need a label map") from None
        names = ()
    if labels.size and labels.min() < 0:
        raise InputError("labels must be non-negative")
    k = int(labels.max()) + 1 if labels.size else 0
    return labels, k, names or tuple(str(i) for i in range(k))


def load_embeddings(path, label_map=None) -> LabeledDataset:
    """Read a ``label,f0..f{d-1}`` CSV or the binary table written by :func:`write_embeddings`."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    with path.open("rb") as fh:
        magic = fh.read(len(EMBEDDING_MAGIC))
    if magic == EMBEDDING_MAGIC:
        return _load_binary(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise InputError(f"{path}: empty embedding file")
    header = rows[0]
    if header[0] != "label":
        raise InputError(f"{path}: first column must be 'label'")
    d = len(header) - 1
    X = np.empty((len(rows) - 1, d))
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != d + 1:
            raise InputError(f"{path}: ragged row {i} ({len(row) - 1} values, expected {d})")
        try:
            X[i - 1] = [float(v) for v in row[1:]]
        except ValueError:
            raise InputError(f"{path}: non-numeric value in row {i}") from None
    labels, k, names = _encode_labels([r[0] for r in rows[1:]], label_map)
    return LabeledDataset(X.T.copy(), labels, k, names)


def _load_binary(path):
    data = path.read_bytes()
    off = len(EMBEDDING_MAGIC)
    n, d = struct.unpack_from("<QQ", data, off)
    off += 16
    need = off + 8 * n + 8 * n * d
    if len(data) != need:
        raise InputError(f"{path}: truncated binary table ({len(data)} bytes, expected {need})")
    if n == 0:
        raise InputError(f"{path}: empty embedding file")
    labels = np.frombuffer(data, dtype="<i8", count=n, offset=off).astype(int)
    X = np.frombuffer(data, dtype="<f8", count=n * d, offset=off + 8 * n).reshape(n, d)
    labels, k, names = _encode_labels(labels, None)
    return LabeledDataset(X.T.astype(float), labels, k, names)


def write_embeddings(path, ds: LabeledDataset, binary=None):
    """Write CSV (``repr`` floats, exact round trip) or, for ``.bin`` paths, the binary table.

    Binary layout: the 8-byte magic ``CPCREMB1``, ``n`` and ``d`` as
    little-endian uint64, ``n`` int64 labels, then the ``n x d`` float64
    rows, all little-endian.
    """
    path = Path(path)
    binary = path.suffix == ".bin" if binary is None else binary
    rows = np.ascontiguousarray(ds.features.T, dtype="<f8")
    n, d = rows.shape
    if binary:
        path.write_bytes(
            EMBEDDING_MAGIC + struct.pack("<QQ", n, d) + np.asarray(ds.labels, dtype="<i8").tobytes() + rows.tobytes()
        )
        return path
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(d)])
        for lab, row in zip(ds.labels, rows):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])
    return path


def flip_labels(y, fraction, seed=None, n_classes=None):
    """Reassign exactly ``floor(fraction * n)`` labels to a different, uniformly drawn class."""
    y = np.asarray(y, dtype=int)
    fraction = float(fraction)
    if not 0 <= fraction < 1:
        raise ParameterError("fraction must lie in [0, 1)")
    k = int(n_classes) if n_classes is not None else int(y.max()) + 1
    if k < 2:
        raise InputError("label flipping needs at least two classes")
    rng = np.random.default_rng(seed)
    count = int(np.floor(fraction * y.size))
    out = y.copy()
    if count == 0:
        return out
    idx = rng.choice(y.size, size=count, replace=False)
    shift = rng.integers(1, k, size=count)
    out[idx] = (y[idx] + shift) % k
    return out


def synthetic_embeddings(n, d=768, n_classes=7, seed=None, mean_rank=6, mean_scale=1.0, spike_rank=8,
                         spike_var=8.0, noise_var=1.0, aligned_fraction=0.5) -> LabeledDataset:
    """Gaussian class clusters whose means span a low-rank subspace.

    A ``spike_rank`` block of high-variance nuisance directions dominates
    the top principal components. ``aligned_fraction`` of each class mean's
    energy lies inside that block; the rest is orthogonal to it, so a
    classifier restricted to the top components misses part of the signal.
    Means and directions depend on ``seed`` only through its first stream,
    so train and test sets drawn with the same ``seed`` share them.
    """
    if n_classes < 2:
        raise InputError("need at least two classes")
    if spike_rank + mean_rank > d:
        raise DimensionError("spike_rank + mean_rank exceeds d")
    geometry, draws = np.random.SeedSequence(seed).spawn(2)
    g = np.random.default_rng(geometry)
    Q, _ = np.linalg.qr(g.standard_normal((d, spike_rank + mean_rank)))
    S, M = Q[:, :spike_rank], Q[:, spike_rank:]
    coords_in = g.standard_normal((n_classes, spike_rank))
    coords_out = g.standard_normal((n_classes, mean_rank))
    a = np.sqrt(aligned_fraction)
    means = mean_scale * (a * coords_in @ S.T / np.sqrt(spike_rank) + np.sqrt(1 - a**2) * coords_out @ M.T / np.sqrt(mean_rank))
    rng = np.random.default_rng(draws)
    labels = rng.integers(0, n_classes, size=n)
    noise = np.sqrt(noise_var) * rng.standard_normal((n, d))
    noise += np.sqrt(spike_var) * rng.standard_normal((n, spike_rank)) @ S.T
    X = means[labels] + noise
    return LabeledDataset(X.T.copy(), labels, n_classes, tuple(str(i) for i in range(n_classes)))
