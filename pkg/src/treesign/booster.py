"""Multi-class boosted regression trees: Robust LogitBoost and MART.

Each iteration fits one J-leaf regression tree per class to the residuals
``r_ik - p_ik``. Trees are grown best-first over histogram statistics of the
integer-binned data. Leaves store the shrunk contribution ``nu * beta``, so
inference is a plain sum of traced leaf values followed by a softmax.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import BinnedDataset, BinningMap, RawDataset, apply_bins

log = logging.getLogger(__name__)

LOGIT = "logit"
MART = "mart"
CRITERIA = (LOGIT, MART)
DEFAULT_DAMPING = 1e-6


class TrainingError(RuntimeError):
    pass


class InfeasibleSplit(ValueError):
    pass


# ---------------------------------------------------------------- split gains


def split_gain_logit(left_r, left_w, total_r, total_w, damping=DEFAULT_DAMPING):
    """Second-order gain ``L^2/(wL+eps) + R^2/(wR+eps) - T^2/(wT+eps)``.

    Works elementwise on arrays as well as on scalars.
    """
    if np.any(np.asarray(damping) < 0):
        raise ValueError("damping must be non-negative")
    right_r = total_r - left_r
    right_w = total_w - left_w
    return (
        left_r * left_r / (left_w + damping)
        + right_r * right_r / (right_w + damping)
        - total_r * total_r / (total_w + damping)
    )


def split_gain_mart(left_r, left_n, total_r, total_n):
    """First-order gain ``L^2/s + R^2/(N-s) - T^2/N``."""
    left_n = np.asarray(left_n)
    if np.any(left_n < 1) or np.any(left_n >= total_n):
        raise InfeasibleSplit(f"split needs 1 <= left_count < {total_n}")
    right_r = total_r - left_r
    return left_r * left_r / left_n + right_r * right_r / (total_n - left_n) - total_r * total_r / total_n


# ---------------------------------------------------------------- trees


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Flat node arrays. ``feature[n] == -1`` marks a leaf.

    An internal node sends x left iff ``x[feature] <= threshold`` (bin units).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def leaf_ids(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf id reached by each row of the binned matrix X."""
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            cur = node[active]
            go_left = X[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = active[self.feature[node[active]] >= 0]
        return node

    def with_values(self, value: np.ndarray) -> "RegressionTree":
        return replace(self, value=_ro(np.array(value, dtype=float)))

    def parents(self) -> np.ndarray:
        par = np.full(self.n_nodes, -1, dtype=np.int64)
        internal = np.flatnonzero(self.feature >= 0)
        par[self.left[internal]] = internal
        par[self.right[internal]] = internal
        return par


def _ro(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def make_tree(feature, threshold, left, right, value) -> RegressionTree:
    return RegressionTree(
        _ro(np.asarray(feature, dtype=np.int64)),
        _ro(np.asarray(threshold, dtype=np.int64)),
        _ro(np.asarray(left, dtype=np.int64)),
        _ro(np.asarray(right, dtype=np.int64)),
        _ro(np.asarray(value, dtype=float)),
    )


def leaf_tree(value: float = 0.0) -> RegressionTree:
    return make_tree([-1], [-1], [-1], [-1], [value])


class _Grower:
    """Best-first growth over padded per-feature histograms."""

    def __init__(self, X, n_bins, residuals, weights, criterion, damping):
        self.X = X
        self.n, self.d = X.shape
        self.width = int(n_bins.max()) if self.d else 1
        self.flat = (X + np.arange(self.d, dtype=np.int64) * self.width).ravel() if self.d else None
        self.r = residuals
        self.w = weights
        self.criterion = criterion
        self.damping = damping

    def histogram(self, rows):
        size = self.d * self.width
        cols = (rows[:, None] * self.d + np.arange(self.d)).ravel()
        b = self.flat[cols]
        hr = np.bincount(b, weights=np.repeat(self.r[rows], self.d), minlength=size)
        hn = np.bincount(b, minlength=size).astype(float)
        if self.criterion == LOGIT:
            hw = np.bincount(b, weights=np.repeat(self.w[rows], self.d), minlength=size)
        else:
            hw = hn
        shape = (self.d, self.width)
        return hr.reshape(shape), hw.reshape(shape), hn.reshape(shape)

    def best_split(self, hist):
        """(gain, feature, threshold) maximizing gain; ties -> smallest feature, then threshold."""
        if self.d == 0 or self.width < 2:
            return -math.inf, -1, -1
        hr, hw, hn = hist
        lr = np.cumsum(hr, axis=1)[:, :-1]
        lw = np.cumsum(hw, axis=1)[:, :-1]
        ln = np.cumsum(hn, axis=1)[:, :-1]
        # node totals, read off feature 0's cumulative row
        tr, tw, tn = lr[0, -1] + hr[0, -1], lw[0, -1] + hw[0, -1], ln[0, -1] + hn[0, -1]
        valid = (ln >= 1) & (ln <= tn - 1)
        if not valid.any():
            return -math.inf, -1, -1
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.criterion == LOGIT:
                gain = split_gain_logit(lr, lw, tr, tw, self.damping)
            else:
                rn = tn - ln
                gain = lr * lr / ln + (tr - lr) ** 2 / rn - tr * tr / tn
        gain = np.where(valid, gain, -np.inf)
        best = int(np.argmax(gain))
        f, t = divmod(best, gain.shape[1])
        return float(gain[f, t]), f, t


def _grow(data_X, n_bins, residuals, weights, J, criterion, damping, leaf_value):
    """Returns the tree and the leaf id of every row."""
    g = _Grower(data_X, n_bins, residuals, weights, criterion, damping)
    feature, threshold, left, right = [-1], [-1], [-1], [-1]
    rows_of = {0: np.arange(g.n)}
    heap = []
    order = 0

    def push(node, hist):
        nonlocal order
        gain, f, t = g.best_split(hist)
        if gain > 0:
            heapq.heappush(heap, (-gain, order, node, f, t, hist))
        order += 1

    push(0, g.histogram(rows_of[0]))
    n_leaves = 1
    while n_leaves < J and heap:
        _, _, node, f, t, hist = heapq.heappop(heap)
        rows = rows_of.pop(node)
        go_left = data_X[rows, f] <= t
        lrows, rrows = rows[go_left], rows[~go_left]
        li, ri = len(feature), len(feature) + 1
        feature[node], threshold[node], left[node], right[node] = f, t, li, ri
        feature += [-1, -1]
        threshold += [-1, -1]
        left += [-1, -1]
        right += [-1, -1]
        rows_of[li], rows_of[ri] = lrows, rrows
        n_leaves += 1
        if n_leaves >= J:
            break
        small, big = (li, ri) if len(lrows) <= len(rrows) else (ri, li)
        hs = g.histogram(rows_of[small])
        hb = tuple(p - s for p, s in zip(hist, hs))
        push(li, hs if small == li else hb)
        push(ri, hs if small == ri else hb)

    value = np.zeros(len(feature))
    leaf_of_row = np.empty(g.n, dtype=np.int64)
    for node, rows in rows_of.items():
        value[node] = leaf_value(rows)
        leaf_of_row[rows] = node
    return make_tree(feature, threshold, left, right, value), leaf_of_row


def _leaf_value_fn(residuals, weights, criterion, damping, learning_rate, num_classes):
    if criterion == LOGIT:
        scale = learning_rate * (num_classes - 1) / num_classes

        def value(rows):
            return scale * residuals[rows].sum() / (damping + weights[rows].sum())
    elif criterion == MART:

        def value(rows):
            return learning_rate * residuals[rows].sum() / len(rows)
    else:
        raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    return value


def build_tree(
    residuals,
    weights,
    data: BinnedDataset,
    J: int,
    criterion: str = LOGIT,
    damping: float = DEFAULT_DAMPING,
    *,
    learning_rate: float = 1.0,
    num_classes: int = 2,
) -> RegressionTree:
    """Best-first J-leaf regression tree on the binned rows of `data`.

    Leaf values are ``learning_rate * beta`` with
    ``beta = (K-1)/K * sum(r) / (damping + sum(w))`` for LogitBoost and
    ``beta = mean(r)`` for MART.
    """
    tree, _ = _fit_tree(residuals, weights, data, J, criterion, damping, learning_rate, num_classes)
    return tree


def _fit_tree(residuals, weights, data, J, criterion, damping, learning_rate, num_classes):
    residuals = np.asarray(residuals, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if len(residuals) == 0:
        raise TrainingError("cannot fit a tree on zero instances")
    if len(residuals) != len(data.X) or len(weights) != len(residuals):
        raise ValueError("residuals, weights and data must have the same length")
    if J < 2:
        raise ValueError(f"J must be at least 2, got {J}")
    leaf_value = _leaf_value_fn(residuals, weights, criterion, damping, learning_rate, num_classes)
    return _grow(data.X, data.bins.n_bins, residuals, weights, J, criterion, damping, leaf_value)


# ---------------------------------------------------------------- ensembles


@dataclass(frozen=True, eq=False)
class Ensemble:
    num_classes: int
    learning_rate: float
    num_leaves: int
    criterion: str
    damping: float
    seed: int
    bins: BinningMap = field(repr=False)
    trees: tuple = field(default=(), repr=False)  # trees[m][k]
    loss_history: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ValueError(f"learning rate must be in (0, 1], got {self.learning_rate}")
        if any(len(row) != self.num_classes for row in self.trees):
            raise ValueError("every iteration needs exactly one tree per class")

    @property
    def num_iterations(self) -> int:
        return len(self.trees)

    @property
    def num_features(self) -> int:
        return self.bins.num_features

    def iter_trees(self):
        for m, row in enumerate(self.trees):
            for k, tree in enumerate(row):
                yield m, k, tree

    def binned_scores(self, Xb: np.ndarray) -> np.ndarray:
        F = np.zeros((len(Xb), self.num_classes))
        for row in self.trees:
            for k, tree in enumerate(row):
                F[:, k] += tree.value[tree.apply(Xb)]
        return F

    def scores(self, X) -> np.ndarray:
        return self.binned_scores(self.bins.bin_values(X))


def predict_scores(model: Ensemble, instance) -> np.ndarray:
    """Summed leaf values per class. A 1-D instance yields a length-K vector;
    a 2-D matrix yields one row per instance."""
    instance = np.asarray(instance, dtype=float)
    F = model.scores(instance)
    return F[0] if instance.ndim == 1 else F


def predict_proba(scores) -> np.ndarray:
    F = np.asarray(scores, dtype=float)
    z = np.exp(F - F.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _log_proba(F):
    shifted = F - F.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def predict_class(model: Ensemble, instance):
    """1-based argmax class; ties go to the smallest class index."""
    F = predict_scores(model, instance)
    return int(np.argmax(F)) + 1 if F.ndim == 1 else np.argmax(F, axis=1) + 1


def evaluate(model: Ensemble, data: RawDataset) -> tuple[float, float]:
    """(accuracy, total negative log-likelihood) on `data`."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if data.labels.max() > model.num_classes:
        raise ValueError(f"labels exceed the model's {model.num_classes} classes")
    F = model.scores(data.to_dense(model.num_features))
    y = data.labels - 1
    acc = float(np.mean(np.argmax(F, axis=1) == y))
    loss = float(-_log_proba(F)[np.arange(len(y)), y].sum())
    return acc, loss


# ---------------------------------------------------------------- training


def _boost(data, F, K, M, J, learning_rate, criterion, damping):
    """Run M rounds of the boosting loop, updating F in place; returns new rows and losses."""
    y = data.labels - 1
    onehot = np.zeros((len(y), K))
    onehot[np.arange(len(y)), y] = 1.0
    p = predict_proba(F)
    rows, losses = [], []
    for m in range(M):
        row = []
        for k in range(K):
            pk = p[:, k]
            tree, leaf_of_row = _fit_tree(
                onehot[:, k] - pk, pk * (1.0 - pk), data, J, criterion, damping, learning_rate, K
            )
            F[:, k] += tree.value[leaf_of_row]
            row.append(tree)
        p = predict_proba(F)
        loss = float(-_log_proba(F)[np.arange(len(y)), y].sum())
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite training loss at iteration {m + 1}")
        log.debug("iteration %d loss %.6f", m + 1, loss)
        rows.append(tuple(row))
        losses.append(loss)
    return rows, losses


def _check_hyper(data, K, J, criterion, damping):
    if len(data) == 0:
        raise TrainingError("training data is empty")
    if K < 2:
        raise TrainingError(f"need at least 2 classes, got {K}")
    present = np.unique(data.labels)
    missing = sorted(set(range(1, K + 1)) - set(present.tolist()))
    if missing:
        raise TrainingError(f"classes absent from training data: {missing}")
    if data.labels.max() > K:
        raise TrainingError(f"labels exceed K={K}")
    if J < 2:
        raise TrainingError(f"J must be at least 2, got {J}")
    if criterion not in CRITERIA:
        raise TrainingError(f"unknown criterion {criterion!r}")
    if damping < 0:
        raise TrainingError("damping must be non-negative")


def train(
    data: BinnedDataset,
    K: int | None = None,
    M: int = 100,
    J: int = 20,
    learning_rate: float = 0.1,
    criterion: str = LOGIT,
    damping: float = DEFAULT_DAMPING,
    seed: int = 0,
) -> Ensemble:
    """Fit an M x K tree ensemble. The loop is deterministic; `seed` is recorded only."""
    K = int(data.labels.max()) if K is None else K
    _check_hyper(data, K, J, criterion, damping)
    if not 0 < learning_rate <= 1:
        raise TrainingError(f"learning rate must be in (0, 1], got {learning_rate}")
    F = np.zeros((len(data), K))
    rows, losses = _boost(data, F, K, M, J, learning_rate, criterion, damping)
    return Ensemble(K, learning_rate, J, criterion, damping, seed, data.bins, tuple(rows), tuple(losses))


def continue_training(model: Ensemble, data: RawDataset, extra: int) -> Ensemble:
    """Append `extra` iterations, starting from the model's own scores on `data`."""
    if extra < 0:
        raise ValueError("extra must be non-negative")
    if data.num_features > model.num_features:
        raise ValueError(
            f"data has {data.num_features} features, model was trained on {model.num_features}"
        )
    if extra == 0:
        return model
    binned = apply_bins(data, model.bins)
    _check_hyper(binned, model.num_classes, model.num_leaves, model.criterion, model.damping)
    F = model.binned_scores(binned.X)
    rows, losses = _boost(
        binned, F, model.num_classes, extra, model.num_leaves, model.learning_rate, model.criterion, model.damping
    )
    return replace(model, trees=model.trees + tuple(rows), loss_history=model.loss_history + tuple(losses))
