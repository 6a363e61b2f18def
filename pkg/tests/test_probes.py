import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskprobe.core import BaselineFeatures, MaskTensor
from maskprobe.features import filter_masks
from maskprobe.probes import (
    DEFAULT_ALPHA,
    FitConfig,
    LogisticObjective,
    ProbeModel,
    feature_matrix,
    fit_logistic,
    fit_ridge,
    load_models,
    predict_frame,
    save_models,
    train_suite,
)

from conftest import binary, multiclass, series


def test_default_alpha():
    assert DEFAULT_ALPHA == 0.01 == FitConfig().alpha
    with pytest.raises(ValueError):
        FitConfig(alpha=-1)


def test_ridge_hand_solved():
    m = fit_ridge(np.eye(2), series("y", [1.0, 0.0]), FitConfig(alpha=0.0))
    np.testing.assert_allclose(m.weights[0], [0.5, -0.5], atol=1e-12)
    assert m.bias[0] == pytest.approx(0.5, abs=1e-12)


def test_ridge_large_alpha_limit(rng):
    X = rng.standard_normal((60, 5))
    y = rng.standard_normal(60) + 4
    m = fit_ridge(X, series("y", y), FitConfig(alpha=1e12))
    assert np.linalg.norm(m.weights) < 1e-6
    assert m.bias[0] == pytest.approx(y.mean(), abs=1e-6)


def _ridge_oracle(X, y, alpha):
    # augmented least squares: bias column unpenalized, sqrt(alpha) I rows for w
    L, D = X.shape
    A = np.vstack([np.column_stack([X, np.ones(L)]),
                   np.column_stack([np.sqrt(alpha) * np.eye(D), np.zeros(D)])])
    sol = np.linalg.lstsq(A, np.concatenate([y, np.zeros(D)]), rcond=None)[0]
    return sol[:D], sol[D]


def test_ridge_matches_independent_solve(rng):
    for _ in range(5):
        X = rng.standard_normal((200, 20))
        y = X @ rng.standard_normal(20) + rng.standard_normal(200)
        m = fit_ridge(X, series("y", y), FitConfig(alpha=0.7))
        w, b = _ridge_oracle(X, y, 0.7)
        np.testing.assert_allclose(m.weights[0], w, rtol=1e-8, atol=1e-12)
        assert m.bias[0] == pytest.approx(b, rel=1e-8)


def test_ridge_respects_validity(rng):
    X = rng.standard_normal((80, 4))
    y = X @ [1, 2, 3, 4] + 0.5
    y_bad = y.copy()
    y_bad[::3] = 1e6
    valid = np.ones(80, bool)
    valid[::3] = False
    a = fit_ridge(X, series("y", y_bad, valid=valid), FitConfig(alpha=0.0))
    b = fit_ridge(X[valid], series("y", y[valid]), FitConfig(alpha=0.0))
    np.testing.assert_allclose(a.weights, b.weights, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_ridge_residual_orthogonality(seed, D):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((3 * D + 5, D))
    y = rng.standard_normal(X.shape[0])
    m = fit_ridge(X, series("y", y), FitConfig(alpha=0.0))
    r = m.predict(X) - y
    assert np.max(np.abs(X.T @ r)) < 1e-8
    assert abs(r.sum()) < 1e-8


def test_ridge_collinear_columns_at_zero_alpha():
    X = np.column_stack([np.arange(6.0), np.arange(6.0), np.ones(6)])
    m = fit_ridge(X, series("y", 2 * np.arange(6.0)), FitConfig(alpha=0.0))
    np.testing.assert_allclose(m.predict(X), 2 * np.arange(6.0), atol=1e-9)


def test_ridge_errors():
    with pytest.raises(ValueError):
        fit_ridge(np.eye(2), series("y", [1.0, 0.0], valid=[0, 0]))
    with pytest.raises(ValueError):
        fit_ridge(np.eye(2), binary("y", [1, 0]))


def test_logistic_separable_1d():
    X = np.linspace(-1, 1, 40)[:, None]
    y = (X[:, 0] > 0.05).astype(int)
    m = fit_logistic(X, binary("c", y), FitConfig(alpha=0.01))
    assert np.mean(m.predict(X) == y) == 1.0
    assert m.weights.shape == (1, 1)


def test_logistic_large_alpha_gives_priors(rng):
    X = rng.standard_normal((300, 4))
    y = rng.choice(3, size=300, p=[0.5, 0.3, 0.2])
    m = fit_logistic(X, multiclass("c", y, 3), FitConfig(alpha=1e9))
    prior = np.bincount(y, minlength=3) / y.size
    assert np.max(np.abs(m.predict_proba(X) - prior)) < 1e-3
    yb = (y == 0).astype(int)
    mb = fit_logistic(X, binary("b", yb), FitConfig(alpha=1e9))
    assert np.max(np.abs(mb.predict_proba(X)[:, 1] - yb.mean())) < 1e-3


def _fd_check(obj, theta, h=1e-5):
    _, g = obj(theta)
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (obj(theta + e)[0] - obj(theta - e)[0]) / (2 * h)
    return np.max(np.abs(fd - g))


@pytest.mark.parametrize("K", [1, 3, 6])
def test_logistic_gradient_finite_differences(K, rng):
    n_classes = 2 if K == 1 else K
    X = rng.standard_normal((25, 5))
    y = rng.integers(0, n_classes, 25)
    obj = LogisticObjective(X, y, K, 0.3)
    for _ in range(10):
        assert _fd_check(obj, rng.standard_normal(obj.size) * 0.5) < 1e-6


def test_logistic_history_monotone_and_deterministic(rng):
    X = (rng.random((400, 30)) < 0.4).astype(float)
    y = (X[:, :3].sum(axis=1) + rng.integers(0, 2, 400)) % 4
    ts = multiclass("c", y, 4)
    m1, hist = fit_logistic(X, ts, FitConfig(), return_trace=True)
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    m2 = fit_logistic(X, ts, FitConfig())
    assert m1.weights.tobytes() == m2.weights.tobytes()
    assert m1.bias.tobytes() == m2.bias.tobytes()
    assert m1.meta["status"] == "converged"


def test_logistic_single_class_error():
    with pytest.raises(ValueError, match="only class"):
        fit_logistic(np.eye(3), binary("c", [1, 1, 1]))


def test_predict_frame_rules(rng):
    W = rng.standard_normal((1, 6))
    m = ProbeModel("r", "continuous", W, [0.75], {}, 0.01)
    assert predict_frame(m, np.zeros(6)) == 0.75
    x = rng.standard_normal(6)
    assert predict_frame(m, x) == pytest.approx(sum(W[0, i] * x[i] for i in range(6)) + 0.75, abs=1e-12)
    tied = ProbeModel("c", "multiclass", np.zeros((4, 6)), np.zeros(4), {}, 0.01, 4)
    assert predict_frame(tied, x) == 0
    zb = ProbeModel("b", "binary", np.zeros((1, 6)), [0.0], {}, 0.01, 2)
    assert predict_frame(zb, x) == 0
    with pytest.raises(ValueError):
        predict_frame(m, np.zeros(5))


def test_argmax_shift_invariance(rng):
    W = rng.standard_normal((5, 8))
    b = rng.standard_normal(5)
    X = rng.standard_normal((30, 8))
    a = ProbeModel("c", "multiclass", W, b, {}, 0.01, 5)
    s = ProbeModel("c", "multiclass", W, b + 17.0, {}, 0.01, 5)
    np.testing.assert_array_equal(a.predict(X), s.predict(X))


def test_masks_are_not_zscored(rng):
    bits = (rng.random((50, 16)) < 0.3).astype(np.uint8)
    fm = filter_masks(MaskTensor(bits, 2, 8))
    X, space = feature_matrix(fm)
    np.testing.assert_array_equal(X, fm.bits.astype(float))
    assert space["type"] == "masks" and "zscore_mean" not in space
    Xb, sb = feature_matrix(BaselineFeatures("stft-logmag", rng.uniform(3, 4, (50, 3))))
    assert sb["type"] == "baseline" and np.all(np.abs(Xb.mean(axis=0)) < 1e-9)


def test_train_suite_isolation_and_roundtrip(tmp_path, rng):
    X = rng.standard_normal((120, 6))
    reg = {
        "vad": binary("vad", (X[:, 0] > 0).astype(int)),
        "snr_in": series("snr_in", X @ np.arange(6.0), iqr=(-13.0, 8.0)),
        "dead": series("dead", np.zeros(120), valid=np.zeros(120)),
    }
    res = train_suite(X, reg, FitConfig())
    assert [m.name for m in res.models] == ["vad", "snr_in"]
    assert set(res.errors) == {"dead"}
    one = train_suite(X, reg, FitConfig(), names=["snr_in"])
    assert len(one) == 1
    save_models(res.models, tmp_path)
    back = {m.name: m for m in load_models(tmp_path)}
    np.testing.assert_array_equal(back["snr_in"].weights, res.models[1].weights)
    assert back["snr_in"].iqr == (-13.0, 8.0)
    assert back["vad"].kind == "binary"
