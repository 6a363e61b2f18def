"""Evaluation metrics, coefficient heatmaps and PCA export."""

from __future__ import annotations

import csv
import logging
import warnings

import numpy as np
from scipy.stats import rankdata

from .core import TargetSeries
from .features import normalize_coefficients

log = logging.getLogger(__name__)


def auc_rank(scores, labels) -> float | None:
    """Binary ROC-AUC via the Mann-Whitney rank statistic (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _valid(truth: TargetSeries, *arrays):
    if any(len(a) != len(truth) for a in arrays):
        raise ValueError("prediction and truth lengths differ")
    idx = np.flatnonzero(truth.valid)
    if idx.size == 0:
        raise ValueError(f"{truth.name}: no valid frames to score")
    return idx


def macro_f1(y_true, y_pred) -> float:
    labels = np.union1d(y_true, y_pred)
    f1s = []
    for c in labels:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


def classification_metrics(pred, scores, truth: TargetSeries) -> dict:
    """Accuracy, macro F1 and ROC-AUC over the valid frames of ``truth``.

    ``scores`` is ``(L,)`` / ``(L, 1)`` (positive-class score) or ``(L, K)``.
    Multi-class AUC is the macro average of one-vs-rest AUCs over classes
    that occur in the truth; it is ``None`` when the truth holds one class.
    """
    pred = np.asarray(pred)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[:, None]
    idx = _valid(truth, pred, scores)
    y, p, s = truth.values[idx], pred[idx], scores[idx]
    out = {
        "n": int(idx.size),
        "accuracy": float(np.mean(p == y)),
        "f1_macro": macro_f1(y, p),
    }
    present = np.unique(y)
    if present.size < 2:
        out["roc_auc"] = None
    elif s.shape[1] == 1 or (s.shape[1] == 2 and truth.n_classes == 2):
        out["roc_auc"] = auc_rank(s[:, -1], y == 1)
    else:
        aucs = [auc_rank(s[:, c], y == c) for c in present]
        out["roc_auc"] = float(np.mean(aucs))
    return out


def regression_metrics(pred, truth: TargetSeries, iqr=None) -> dict:
    pred = np.asarray(pred, dtype=np.float64)
    idx = _valid(truth, pred)
    if idx.size < 2:
        raise ValueError(f"{truth.name}: need at least 2 valid frames")
    y, p = truth.values[idx], pred[idx]
    err = y - p
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = None if ss_tot == 0 else 1.0 - float(np.sum(err * err)) / ss_tot
    out = {"n": int(idx.size), "r2": r2, "mae": mae, "rmse": rmse}
    iqr = iqr if iqr is not None else truth.iqr
    if iqr is not None:
        width = iqr[1] - iqr[0]
        out["mae_over_iqr"] = mae / width
        out["rmse_over_iqr"] = rmse / width
    return out


def evaluate_model(model, X, truth: TargetSeries) -> dict:
    if model.is_classification:
        return classification_metrics(model.predict(X), model.decision_function(X), truth)
    return regression_metrics(model.predict(X), truth, model.iqr or truth.iqr)


def heatmap_rows(models, channel_std, subset=None, channel_map=None, channels_per_block=None) -> dict:
    """Std-scaled, unit-norm coefficient rows for a coefficient heatmap.

    Columns are the ``subset`` positions (default: all features), ordered by
    processing block and then channel.  Rows that are identically zero after
    scaling are returned as zeros and listed under ``"zero_rows"``.
    """
    channel_std = np.asarray(channel_std, dtype=np.float64)
    cols = np.arange(channel_std.size) if subset is None else np.asarray(subset, dtype=np.int64)
    if cols.size and (cols.min() < 0 or cols.max() >= channel_std.size):
        raise ValueError("subset lies outside the model feature space")
    if channel_map is not None and channels_per_block:
        flat = np.asarray(channel_map)[cols]
        order = np.lexsort((flat, flat // channels_per_block))
        cols, flat = cols[order], flat[order]
        blocks = flat // channels_per_block
    else:
        cols = np.sort(cols)
        flat = cols
        blocks = np.zeros(cols.size, dtype=np.int64)
    rows, labels = [], []
    for m in models:
        W = np.atleast_2d(m.weights)
        if W.shape[1] != channel_std.size:
            raise ValueError(f"model {m.name} does not match feature width {channel_std.size}")
        rows.append(W[:, cols])
        if W.shape[0] == 1:
            labels.append(m.name)
        else:
            labels += [f"{m.name}.{k}" for k in range(W.shape[0])]
    matrix, zero = normalize_coefficients(np.vstack(rows), channel_std[cols])
    zero_rows = [labels[i] for i in np.flatnonzero(zero)]
    if zero_rows:
        warnings.warn(f"zero coefficient rows in heatmap: {zero_rows}")
    return {"matrix": matrix, "rows": labels, "columns": cols, "channels": flat,
            "blocks": blocks, "zero_rows": zero_rows}


def write_heatmap_csv(hm: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["target"] + [f"b{b}c{c}" for b, c in zip(hm["blocks"], hm["channels"])])
        for name, row in zip(hm["rows"], hm["matrix"]):
            w.writerow([name] + [repr(float(v)) for v in row])


class PCA:
    """Exact PCA from the eigendecomposition of the covariance matrix."""

    def __init__(self, k: int):
        self.k = int(k)

    def fit(self, X):
        X = np.asarray(X, dtype=np.float64)
        L, D = X.shape
        if L <= self.k:
            raise ValueError(f"need more than k={self.k} rows, got {L}")
        if self.k > D:
            raise ValueError(f"k={self.k} exceeds dimension {D}")
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        cov = Xc.T @ Xc / (L - 1)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][: self.k]
        comps = evecs[:, order].T
        # sign: largest-magnitude entry positive
        pivot = np.argmax(np.abs(comps), axis=1)
        signs = np.sign(comps[np.arange(self.k), pivot])
        signs[signs == 0] = 1.0
        self.components_ = comps * signs[:, None]
        self.explained_variance_ = np.clip(evals[order], 0.0, None)
        tol = max(evals.max(), 0.0) * D * np.finfo(float).eps
        self.degenerate_ = np.flatnonzero(self.explained_variance_ <= tol)
        if self.degenerate_.size:
            log.warning("PCA: %d trailing components have zero variance (k > rank)",
                        self.degenerate_.size)
        return self

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean_) @ self.components_.T


def pca_fit(X, k: int = 32) -> PCA:
    return PCA(k).fit(X)


def pca_project(pca: PCA, X) -> np.ndarray:
    return pca.transform(X)


def subsample_frames(X, fraction: float, seed: int = 0):
    """Seeded uniform subset of ``floor(fraction * L)`` rows, returned in time order.

    Returns ``(rows, indices)``.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    X = np.asarray(X)
    L = X.shape[0]
    n = int(np.floor(fraction * L))
    if n == L:
        idx = np.arange(L)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(L, size=n, replace=False))
    return X[idx], idx


def write_projection_csv(P: np.ndarray, path, frame_index=None, labels: dict | None = None) -> None:
    labels = labels or {}
    frame_index = np.arange(P.shape[0]) if frame_index is None else frame_index
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame"] + [f"pc{i}" for i in range(P.shape[1])] + list(labels))
        for i, row in enumerate(P):
            w.writerow([int(frame_index[i])] + [repr(float(v)) for v in row]
                       + [labels[k][i] for k in labels])
