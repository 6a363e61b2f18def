"""Linear probes: ridge regression and l2-regularized (multinomial) logistic regression."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit, logsumexp, softmax

from .core import BINARY, CONTINUOUS, MULTICLASS, BaselineFeatures, FilteredMasks, TargetSeries
from .features import zscore

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.01


@dataclass(frozen=True)
class FitConfig:
    alpha: float = DEFAULT_ALPHA
    max_iters: int = 2000
    grad_tol: float = 1e-7
    memory: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass
class ProbeModel:
    name: str
    kind: str
    weights: np.ndarray
    bias: np.ndarray
    feature_space: dict = field(default_factory=dict)
    alpha: float = DEFAULT_ALPHA
    n_classes: int | None = None
    iqr: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.bias = np.atleast_1d(np.asarray(self.bias, dtype=np.float64))
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must equal weight rows")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError(f"{self.name}: non-finite coefficients")

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weights.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.kind != CONTINUOUS

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features:
            raise ValueError(f"{self.name}: expected {self.n_features} features, got {X.shape[-1]}")
        return X @ self.weights.T + self.bias

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        if self.kind == BINARY:
            p1 = expit(z[..., 0])
            return np.stack([1 - p1, p1], axis=-1)
        if self.kind == MULTICLASS:
            return softmax(z, axis=-1)
        raise TypeError("regression probes have no class probabilities")

    def predict(self, X) -> np.ndarray:
        z = self.decision_function(X)
        if self.kind == CONTINUOUS:
            return z[..., 0]
        return scores_to_class(z, self.kind)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "n_classes": self.n_classes,
            "iqr": list(self.iqr) if self.iqr else None,
            "alpha": self.alpha,
            "feature_space": self.feature_space,
            "shape": list(self.weights.shape),
            "weights": self.weights.ravel().tolist(),
            "bias": self.bias.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeModel":
        W = np.asarray(d["weights"], dtype=np.float64).reshape(d["shape"])
        return cls(d["name"], d["kind"], W, d["bias"], d.get("feature_space", {}),
                   d.get("alpha", DEFAULT_ALPHA), d.get("n_classes"),
                   tuple(d["iqr"]) if d.get("iqr") else None, d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ProbeModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def scores_to_class(z: np.ndarray, kind: str) -> np.ndarray:
    """Argmax class; ties resolve to the lowest index (logit 0 -> class 0)."""
    z = np.asarray(z)
    if kind == BINARY:
        return (z[..., 0] > 0).astype(np.int64)
    return np.argmax(z, axis=-1)


def predict_frame(model: ProbeModel, x):
    """Single-frame prediction: a float for regression, a class index otherwise."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict_frame expects one feature vector")
    out = model.predict(x[None, :])[0]
    return float(out) if model.kind == CONTINUOUS else int(out)


# --------------------------------------------------------------------------
# features


def feature_matrix(features):
    """Design matrix and feature-space descriptor for any feature container.

    Binary masks are used as-is; baseline (real-valued) features are
    z-scored unless they already carry stats.
    """
    if isinstance(features, FilteredMasks):
        return features.bits.astype(np.float64), {
            "type": "masks",
            "channel_map": features.channel_map.tolist(),
            "n_blocks": features.n_blocks,
            "channels_per_block": features.channels_per_block,
        }
    if isinstance(features, BaselineFeatures):
        if features.zscore_mean is None:
            X, (mean, std) = zscore(features.values)
        else:
            X, mean, std = features.values, features.zscore_mean, features.zscore_std
        return np.asarray(X, dtype=np.float64), {
            "type": "baseline",
            "kind": features.kind,
            "zscore_mean": np.asarray(mean).tolist(),
            "zscore_std": np.asarray(std).tolist(),
        }
    X = np.asarray(features, dtype=np.float64)
    return X, {"type": "dense", "n_features": X.shape[1]}


def _valid_rows(X, y: TargetSeries):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != len(y):
        raise ValueError(f"{y.name}: {X.shape[0]} feature rows vs {len(y)} target frames")
    idx = np.flatnonzero(y.valid)
    if idx.size == 0:
        raise ValueError(f"{y.name}: no valid frames")
    return X[idx], y.values[idx]


# --------------------------------------------------------------------------
# ridge


def ridge_solve(X: np.ndarray, y: np.ndarray, alpha: float):
    """Minimize ``||Xw + b - y||^2 + alpha ||w||^2`` with unpenalized ``b``."""
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    A = Xc.T @ Xc
    A[np.diag_indices_from(A)] += alpha
    rhs = Xc.T @ yc
    try:
        c, low = linalg.cho_factor(A, check_finite=False)
        d = np.abs(np.diag(c))
        # rounding can let Cholesky "succeed" on a singular Gram with a ~0 pivot
        if d.size and d.min() ** 2 <= 1e-12 * d.max() ** 2:
            raise linalg.LinAlgError("numerically singular Gram matrix")
        w = linalg.cho_solve((c, low), rhs, check_finite=False)
    except linalg.LinAlgError:
        # singular Gram (alpha = 0, collinear columns): minimum-norm solution
        w = linalg.lstsq(Xc, yc, check_finite=False)[0] if alpha == 0 else linalg.solve(A, rhs, assume_a="sym")
    return w, y_mean - x_mean @ w


def fit_ridge(X, y: TargetSeries, cfg: FitConfig = FitConfig(), feature_space=None) -> ProbeModel:
    if y.kind != CONTINUOUS:
        raise ValueError(f"{y.name}: ridge needs a continuous target")
    Xv, yv = _valid_rows(X, y)
    if Xv.shape[0] < Xv.shape[1]:
        warnings.warn(f"{y.name}: only {Xv.shape[0]} valid frames for {Xv.shape[1]} features")
    w, b = ridge_solve(Xv, yv.astype(np.float64), cfg.alpha)
    return ProbeModel(y.name, CONTINUOUS, w[None, :], [b], feature_space or {}, cfg.alpha,
                      None, y.iqr, {"solver": "centered-normal-equations", "n_train": int(Xv.shape[0])})


# --------------------------------------------------------------------------
# logistic


class LogisticObjective:
    """Cross-entropy summed over rows plus ``alpha/2 ||W||^2`` (bias free).

    Parameters are packed as ``[W.ravel(), b]`` with ``W`` of shape
    ``(K_out, D)``; ``K_out = 1`` means a sigmoid (binary) model.
    """

    def __init__(self, X, y, n_outputs: int, alpha: float):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.K = n_outputs
        self.alpha = alpha
        self.D = self.X.shape[1]
        if self.K > 1:
            self.Y = np.zeros((self.y.size, self.K))
            self.Y[np.arange(self.y.size), self.y] = 1.0

    @property
    def size(self) -> int:
        return self.K * (self.D + 1)

    def unpack(self, theta):
        W = theta[: self.K * self.D].reshape(self.K, self.D)
        return W, theta[self.K * self.D:]

    def __call__(self, theta):
        """Return ``(loss, gradient)``."""
        W, b = self.unpack(theta)
        Z = self.X @ W.T + b
        if self.K == 1:
            z = Z[:, 0]
            loss = -np.sum(np.where(self.y == 1, log_expit(z), log_expit(-z)))
            R = (expit(z) - self.y)[:, None]
        else:
            lse = logsumexp(Z, axis=1)
            loss = np.sum(lse - Z[np.arange(self.y.size), self.y])
            R = np.exp(Z - lse[:, None]) - self.Y
        loss += 0.5 * self.alpha * np.sum(W * W)
        gW = R.T @ self.X + self.alpha * W
        gb = R.sum(axis=0)
        return float(loss), np.concatenate([gW.ravel(), gb])


def lbfgs_minimize(fun, x0, max_iters=2000, grad_tol=1e-7, memory=10, scale=1.0):
    """Monotone L-BFGS with backtracking Armijo line search.

    ``fun`` returns ``(f, g)``.  Convergence is declared when
    ``max|g| / scale < grad_tol``.  Every accepted step decreases ``f``;
    the objective trace is returned for auditing.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    history = [f]
    S, Y = [], []
    status = "max_iters"
    it = 0
    for it in range(1, max_iters + 1):
        if np.max(np.abs(g)) / scale < grad_tol:
            status = "converged"
            it -= 1
            break
        d = _two_loop(g, S, Y)
        if g @ d >= 0:
            S, Y = [], []
            d = -g
        t = 1.0 if S else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))
        gd = g @ d
        while True:
            x_new = x + t * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * t * gd:
                break
            t *= 0.5
            if t < 1e-20:
                break
        if not (np.isfinite(f_new) and f_new <= f + 1e-4 * t * gd):
            if S:
                S, Y = [], []
                continue
            status = "line_search_stalled"
            break
        s, yv = x_new - x, g_new - g
        if s @ yv > 1e-12 * (yv @ yv):
            S.append(s)
            Y.append(yv)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        x, f, g = x_new, f_new, g_new
        history.append(f)
    return x, {"status": status, "iterations": it, "history": history,
               "grad_inf": float(np.max(np.abs(g)) / scale)}


def _two_loop(g, S, Y):
    q = -g.copy()
    if not S:
        return q
    rho = [1.0 / (y @ s) for s, y in zip(S, Y)]
    a = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
        ai = r * (s @ q)
        a.append(ai)
        q -= ai * y
    q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for (s, y, r), ai in zip(zip(S, Y, rho), reversed(a)):
        q += (ai - r * (y @ q)) * s
    return q


def fit_logistic(X, y: TargetSeries, cfg: FitConfig = FitConfig(), feature_space=None,
                 return_trace=False):
    if not y.is_classification:
        raise ValueError(f"{y.name}: logistic regression needs a class target")
    Xv, yv = _valid_rows(X, y)
    present = np.unique(yv)
    if present.size < 2:
        raise ValueError(f"{y.name}: only class {present.tolist()} present among valid frames")
    K = 1 if y.kind == BINARY else y.n_classes
    obj = LogisticObjective(Xv, yv, K, cfg.alpha)
    theta, info = lbfgs_minimize(obj, np.zeros(obj.size), cfg.max_iters, cfg.grad_tol,
                                 cfg.memory, scale=float(Xv.shape[0]))
    if not np.isfinite(info["history"][-1]):
        raise FloatingPointError(f"{y.name}: non-finite loss")
    W, b = obj.unpack(theta)
    meta = {"solver": "lbfgs-armijo", "status": info["status"], "iterations": info["iterations"],
            "final_loss": info["history"][-1], "n_train": int(Xv.shape[0]),
            "multiclass": "softmax" if K > 1 else "sigmoid"}
    model = ProbeModel(y.name, y.kind, W.copy(), b.copy(), feature_space or {}, cfg.alpha,
                       y.n_classes, None, meta)
    return (model, info["history"]) if return_trace else model


def fit_probe(X, y: TargetSeries, cfg: FitConfig = FitConfig(), feature_space=None) -> ProbeModel:
    if y.kind == CONTINUOUS:
        return fit_ridge(X, y, cfg, feature_space)
    return fit_logistic(X, y, cfg, feature_space)


@dataclass
class SuiteResult:
    models: list
    errors: dict

    def __iter__(self):
        return iter(self.models)

    def __len__(self):
        return len(self.models)


def train_suite(features, registry: dict, cfg: FitConfig = FitConfig(), names=None) -> SuiteResult:
    """Fit one probe per registered target; failures are recorded, not raised."""
    X, space = feature_matrix(features)
    models, errors = [], {}
    for name in names or list(registry):
        ts = registry[name]
        try:
            models.append(fit_probe(X, ts, cfg, space))
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
            log.warning("target %s failed: %s", name, e)
            errors[name] = str(e)
    return SuiteResult(models, errors)


def save_models(models, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for m in models:
        m.save(out_dir / f"{m.name}.model.json")


def load_models(in_dir) -> list:
    return [ProbeModel.load(p) for p in sorted(Path(in_dir).glob("*.model.json"))]
