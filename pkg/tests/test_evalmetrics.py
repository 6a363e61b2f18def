import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskprobe.evalmetrics import (
    PCA,
    auc_rank,
    classification_metrics,
    heatmap_rows,
    macro_f1,
    pca_fit,
    regression_metrics,
    subsample_frames,
)
from maskprobe.inferbank import ROSTER_IQR
from maskprobe.probes import ProbeModel

from conftest import binary, multiclass, series


def _auc_sweep(scores, labels):
    # trapezoidal area under the ROC traced by every distinct threshold
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    thr = np.concatenate(([np.inf], np.unique(scores)[::-1], [-np.inf]))
    tpr = [np.mean(scores[labels] >= t) for t in thr]
    fpr = [np.mean(scores[~labels] >= t) for t in thr]
    return sum((fpr[i + 1] - fpr[i]) * (tpr[i + 1] + tpr[i]) / 2 for i in range(len(thr) - 1))


def _f1_brute(y, p):
    out = []
    for c in sorted(set(y) | set(p)):
        tp = sum(1 for a, b in zip(y, p) if a == c and b == c)
        fp = sum(1 for a, b in zip(y, p) if a != c and b == c)
        fn = sum(1 for a, b in zip(y, p) if a == c and b != c)
        out.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(out) / len(out)


def test_perfect_prediction():
    y = np.array([0, 1, 1, 0, 1])
    m = classification_metrics(y, y.astype(float), binary("v", y))
    assert m == {"n": 5, "accuracy": 1.0, "f1_macro": 1.0, "roc_auc": 1.0}


def test_constant_prediction_on_balanced_truth():
    y = np.array([0, 1] * 5)
    m = classification_metrics(np.zeros(10, int), np.zeros(10), binary("v", y))
    assert m["accuracy"] == 0.5 and m["roc_auc"] == 0.5


def test_handcrafted_confusion():
    y = np.array([0, 0, 1, 1, 1, 0, 1, 0, 1, 1])
    s = np.array([0.1, 0.4, 0.35, 0.8, 0.4, 0.2, 0.9, 0.55, 0.4, 0.05])
    p = (s > 0.38).astype(int)
    m = classification_metrics(p, s, binary("v", y))
    assert m["roc_auc"] == _auc_sweep(s, y)
    assert m["f1_macro"] == pytest.approx(_f1_brute(y.tolist(), p.tolist()), abs=1e-15)
    assert m["accuracy"] == np.mean(p == y)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=20))
def test_auc_rank_equals_sweep(pairs):
    s = np.array([p[0] for p in pairs], float)
    y = np.array([p[1] for p in pairs])
    if y.all() or not y.any():
        assert auc_rank(s, y) is None
        return
    assert auc_rank(s, y) == pytest.approx(_auc_sweep(s, y), abs=1e-12)


def test_multiclass_metrics_one_vs_rest():
    y = np.array([0, 1, 2, 2, 1, 0, 2, 1, 0, 0, 1, 2])
    rng = np.random.default_rng(3)
    S = rng.standard_normal((12, 3))
    p = S.argmax(axis=1)
    m = classification_metrics(p, S, multiclass("a", y, 3))
    assert m["roc_auc"] == pytest.approx(np.mean([_auc_sweep(S[:, c], y == c) for c in range(3)]), abs=1e-12)
    assert m["f1_macro"] == pytest.approx(_f1_brute(y.tolist(), p.tolist()), abs=1e-15)


def test_single_class_truth_has_no_auc():
    y = np.ones(6, int)
    assert classification_metrics(y, np.ones(6), binary("v", y))["roc_auc"] is None


def test_invalid_frames_excluded():
    y = np.array([0, 1, 0, 1])
    p = np.array([0, 1, 1, 0])
    m = classification_metrics(p, p.astype(float), binary("v", y, valid=[1, 1, 0, 0]))
    assert m["n"] == 2 and m["accuracy"] == 1.0
    with pytest.raises(ValueError):
        classification_metrics(p, p, binary("v", y, valid=[0, 0, 0, 0]))


def test_macro_f1_brute_exhaustive():
    for y in itertools.product(range(3), repeat=4):
        for p in ([0, 1, 2, 0], [2, 2, 2, 2], list(y)):
            assert macro_f1(np.array(y), np.array(p)) == pytest.approx(_f1_brute(y, p), abs=1e-15)


def test_regression_examples():
    y = np.array([1.0, 3.0, 2.0, 6.0, 4.0, 0.5, 2.5, 3.5, 5.0, 1.5, 2.0, 4.5])
    m = regression_metrics(y, series("t", y))
    assert m["r2"] == 1.0 and m["mae"] == 0.0
    assert regression_metrics(np.full(12, y.mean()), series("t", y))["r2"] == 0.0
    p = y + np.array([0.5, -0.5, 1.0, 0.0, -1.0, 0.25, -0.25, 0.0, 0.5, 0.0, -0.5, 1.0])
    m = regression_metrics(p, series("t", y))
    err = y - p
    assert m["mae"] == np.mean(np.abs(err))
    assert m["rmse"] == np.sqrt(np.mean(err ** 2))
    assert m["r2"] == 1 - np.sum(err ** 2) / np.sum((y - y.mean()) ** 2)
    assert regression_metrics(np.zeros(4), series("t", np.ones(4)))["r2"] is None


@pytest.mark.parametrize("name", sorted(ROSTER_IQR))
def test_iqr_normalization(name):
    lo, hi = ROSTER_IQR[name]
    y = np.linspace(lo, hi, 15)
    p = y + 0.3 * np.sign(np.sin(np.arange(15)))
    m = regression_metrics(p, series(name, y, iqr=(lo, hi)))
    assert m["mae_over_iqr"] == m["mae"] / (hi - lo)
    assert m["rmse_over_iqr"] == m["rmse"] / (hi - lo)


def test_snr_iqr_example():
    y = np.array([0.0, 4.2])
    m = regression_metrics(y + np.array([2.1, -2.1]), series("snr_in", y, iqr=ROSTER_IQR["snr_in"]))
    assert m["mae"] == pytest.approx(2.1) and m["mae_over_iqr"] == pytest.approx(0.1)


def _m(W, name="m"):
    W = np.atleast_2d(W)
    return ProbeModel(name, "continuous" if W.shape[0] == 1 else "multiclass", W, np.zeros(W.shape[0]), {},
                      0.01, None if W.shape[0] == 1 else W.shape[0])


def test_heatmap_single_coefficient():
    hm = heatmap_rows([_m([0, 0, -3.0, 0])], np.array([0.1, 0.2, 0.3, 0.4]))
    assert hm["matrix"].tolist() == [[0, 0, -1.0, 0]]


def test_heatmap_scale_invariance_and_norms(rng):
    W = rng.standard_normal((4, 9))
    std = rng.uniform(0.05, 0.5, 9)
    a = heatmap_rows([_m(W)], std)
    b = heatmap_rows([_m(W * np.array([[7], [1], [0.5], [3]]))], std)
    np.testing.assert_allclose(a["matrix"], b["matrix"], atol=1e-15)
    assert np.all(np.abs(np.linalg.norm(a["matrix"], axis=1) - 1) < 1e-12)
    assert a["rows"] == ["m.0", "m.1", "m.2", "m.3"]


def test_heatmap_groups_by_block_and_flags_zero_rows():
    cmap = np.array([9, 1, 17, 3])  # columns are not sorted by channel on purpose
    with pytest.warns(UserWarning):
        hm = heatmap_rows([_m(np.ones(4), "a"), _m(np.zeros(4), "z")], np.ones(4), None, cmap, 8)
    assert hm["channels"].tolist() == [1, 3, 9, 17]
    assert hm["blocks"].tolist() == [0, 0, 1, 2]
    assert hm["zero_rows"] == ["z"] and np.all(hm["matrix"][1] == 0)
    with pytest.raises(ValueError):
        heatmap_rows([_m(np.ones(4))], np.ones(4), [7])


def test_pca_line_has_one_component(rng):
    t = rng.standard_normal(50)
    pca = pca_fit(np.column_stack([t, 2 * t + 1]), 2)
    assert pca.explained_variance_[0] > 0 and pca.explained_variance_[1] < 1e-12
    assert pca.degenerate_.tolist() == [1]


def test_pca_matches_eigendecomposition(rng):
    X = rng.standard_normal((100, 8)) @ rng.standard_normal((8, 8))
    pca = PCA(3).fit(X)
    C = np.cov(X, rowvar=False)
    ev, V = np.linalg.eig(C)
    order = np.argsort(ev.real)[::-1][:3]
    for i, j in enumerate(order):
        v = V[:, j].real
        v = v * np.sign(v[np.argmax(np.abs(v))])
        np.testing.assert_allclose(pca.components_[i], v, atol=1e-8)
        assert pca.explained_variance_[i] == pytest.approx(ev[j].real, rel=1e-8)
    np.testing.assert_allclose(pca.components_ @ pca.components_.T, np.eye(3), atol=1e-9)
    assert np.all(pca.components_[np.arange(3), np.argmax(np.abs(pca.components_), axis=1)] > 0)


def test_pca_is_isometric_on_low_rank_data(rng):
    X = rng.standard_normal((40, 3)) @ rng.standard_normal((3, 10))
    P = PCA(3).fit(X).transform(X)
    d = lambda A: np.linalg.norm(A[:, None] - A[None], axis=-1)  # noqa: E731
    np.testing.assert_allclose(d(P), d(X), atol=1e-8)


def test_pca_needs_more_rows_than_k():
    with pytest.raises(ValueError):
        pca_fit(np.zeros((3, 5)), 3)


def test_subsample_frames():
    X = np.arange(1000)[:, None]
    rows, idx = subsample_frames(X, 1.0, 4)
    np.testing.assert_array_equal(rows, X)
    r1, i1 = subsample_frames(X, 0.2, 4)
    r2, i2 = subsample_frames(X, 0.2, 4)
    assert len(r1) == 200 and np.array_equal(i1, i2)
    assert np.all(np.diff(i1) > 0)
    assert len(subsample_frames(np.zeros((7, 1)), 0.2)[0]) == 1
    with pytest.raises(ValueError):
        subsample_frames(X, 0.0)
