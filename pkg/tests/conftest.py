from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from treesign.booster import LOGIT, Ensemble, make_tree, train
from treesign.data import BinningMap, BinnedDataset, apply_bins, build_bins, read_libsvm

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"
PENDIGITS_TRAIN = DATA / "pendigits.train"
PENDIGITS_TEST = DATA / "pendigits.test"

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def integer_bins(n_bins) -> BinningMap:
    """Map where bin b of feature d has raw representative b."""
    reps = tuple(np.arange(n, dtype=float) for n in n_bins)
    cuts = tuple(r[:-1] + 0.5 for r in reps)
    return BinningMap(cuts, reps)


def binned(X, labels, n_bins=None) -> BinnedDataset:
    X = np.asarray(X, dtype=np.int32)
    if n_bins is None:
        n_bins = X.max(axis=0) + 1
    return BinnedDataset(X, np.asarray(labels, dtype=np.int64), integer_bins(n_bins))


def stump(feature, threshold, lo_value, hi_value):
    return make_tree([feature, -1, -1], [threshold, -1, -1], [1, -1, -1], [2, -1, -1], [0.0, lo_value, hi_value])


def ensemble(trees, n_bins, nu=0.1, J=2) -> Ensemble:
    K = len(trees[0]) if trees else 2
    return Ensemble(K, nu, J, LOGIT, 1e-6, 0, integer_bins(n_bins), tuple(tuple(r) for r in trees))


def toy_model(seed=0, D=3, n_bins=6, K=3, M=3, J=4, N=60) -> Ensemble:
    rng = np.random.default_rng(seed)
    X = rng.integers(0, n_bins, size=(N, D))
    y = (X.sum(axis=1) * K // (D * n_bins)) % K + 1
    y[:K] = np.arange(1, K + 1)
    return train(binned(X, y, [n_bins] * D), K, M, J, 0.3)


@pytest.fixture(scope="session")
def pendigits():
    tr = read_libsvm(PENDIGITS_TRAIN)
    te = read_libsvm(PENDIGITS_TEST)
    return tr, te, apply_bins(tr, build_bins(tr))


@pytest.fixture(scope="session")
def pendigits_j20_m200(pendigits):
    return train(pendigits[2], 10, 200, 20)


@pytest.fixture(scope="session")
def pendigits_j20_m50(pendigits_j20_m200):
    from treesign.attacks import attack_remove

    return attack_remove(pendigits_j20_m200, 150)


@pytest.fixture(scope="session")
def small_pendigits_model(pendigits):
    """Short run on the real data; quick enough for unit tests."""
    return train(pendigits[2], 10, 8, 8)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: dict = {}


def record_criterion(number: int, title: str, passed: bool, detail: str):
    ACCEPTANCE[number] = (title, passed, detail)
    print(f"{'PASS' if passed else 'FAIL'} [{number}] {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} [{number:2d}] {title}: {detail}")
