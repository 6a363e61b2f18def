import numpy as np
import pytest

from maskprobe.core import BINARY, CONTINUOUS, MULTICLASS, TargetSeries


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def series(name, values, kind=CONTINUOUS, valid=None, n_classes=None, iqr=None):
    values = np.asarray(values)
    valid = np.ones(values.size, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if kind != CONTINUOUS:
        values = values.astype(np.int64)
        if n_classes is None:
            n_classes = 2 if kind == BINARY else int(values.max()) + 1
    return TargetSeries(name, kind, values, valid, n_classes, iqr)


def binary(name, values, valid=None):
    return series(name, values, BINARY, valid)


def multiclass(name, values, k, valid=None):
    return series(name, values, MULTICLASS, valid, k)
