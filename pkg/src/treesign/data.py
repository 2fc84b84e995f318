"""LIBSVM parsing and per-feature adaptive binning.

Every downstream component works on non-negative integer bin indices. A
`BinningMap` converts raw feature values to bins and back (each bin keeps one
representative raw value, used to materialize signature keys).
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_MAX_BINS = 65535


class ParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class ConfigError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class RawDataset:
    """Labeled sparse instances. Labels are 1-based class indices."""

    labels: np.ndarray
    indices: tuple  # per instance: int array of 1-based feature ids, strictly increasing
    values: tuple  # per instance: float array aligned with `indices`
    num_features: int
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def to_dense(self, num_features: int | None = None) -> np.ndarray:
        """Dense N x D matrix; absent features are 0, ids beyond D are dropped."""
        d = self.num_features if num_features is None else num_features
        X = np.zeros((len(self), d))
        for i, (idx, val) in enumerate(zip(self.indices, self.values)):
            keep = idx <= d
            X[i, idx[keep] - 1] = val[keep]
        return X

    def __eq__(self, other) -> bool:
        if not isinstance(other, RawDataset):
            return NotImplemented
        return (
            self.num_features == other.num_features
            and self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
            and len(self.indices) == len(other.indices)
            and all(np.array_equal(a, b) for a, b in zip(self.indices, other.indices))
            and all(np.array_equal(a, b) for a, b in zip(self.values, other.values))
        )


def parse_libsvm(text: str | bytes | Iterable[str], label_base: int | None = None) -> RawDataset:
    """Parse `label idx:val ...` lines.

    Labels may be 0- or 1-based. With ``label_base=None`` a file containing
    label 0 is taken as 0-based and shifted up by one.
    """
    if isinstance(text, bytes):
        text = text.decode()
    lines = io.StringIO(text) if isinstance(text, str) else text

    labels: list[int] = []
    indices: list[np.ndarray] = []
    values: list[np.ndarray] = []
    max_feat = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            lab = float(tokens[0])
        except ValueError:
            raise ParseError(lineno, f"non-numeric label {tokens[0]!r}") from None
        if lab != int(lab) or lab < 0:
            raise ParseError(lineno, f"label must be a non-negative integer, got {tokens[0]!r}")
        idx = np.empty(len(tokens) - 1, dtype=np.int64)
        val = np.empty(len(tokens) - 1)
        prev = 0
        for j, tok in enumerate(tokens[1:]):
            f, sep, v = tok.partition(":")
            if not sep:
                raise ParseError(lineno, f"expected idx:val, got {tok!r}")
            try:
                fi, fv = int(f), float(v)
            except ValueError:
                raise ParseError(lineno, f"non-numeric token {tok!r}") from None
            if fi <= prev:
                raise ParseError(lineno, f"feature ids must be positive and increasing ({fi} after {prev})")
            idx[j], val[j] = fi, fv
            prev = fi
        labels.append(int(lab))
        indices.append(_frozen(idx))
        values.append(_frozen(val))
        max_feat = max(max_feat, prev)

    y = np.array(labels, dtype=np.int64)
    if label_base is None:
        label_base = 0 if (y == 0).any() else 1
    if label_base not in (0, 1):
        raise ConfigError("label_base must be 0 or 1")
    y = y + (1 - label_base)
    if len(y) and y.min() < 1:
        raise ParseError(0, "label 0 in a file declared 1-based")
    k = int(y.max()) if len(y) else 0
    return RawDataset(_frozen(y), tuple(indices), tuple(values), max_feat, k)


def read_libsvm(path, label_base: int | None = None) -> RawDataset:
    with open(path) as fh:
        return parse_libsvm(fh, label_base=label_base)


def format_libsvm(data: RawDataset) -> str:
    out = []
    for lab, idx, val in zip(data.labels, data.indices, data.values):
        feats = " ".join(f"{i}:{v!r}" for i, v in zip(idx.tolist(), val.tolist()))
        out.append(f"{lab} {feats}".rstrip())
    return "".join(line + "\n" for line in out)


def format_instances(X: np.ndarray, labels: Sequence[int] | None = None) -> str:
    """Dense rows to LIBSVM lines (zeros omitted)."""
    X = np.atleast_2d(X)
    labels = [0] * len(X) if labels is None else labels
    out = []
    for lab, row in zip(labels, X):
        nz = np.nonzero(row)[0]
        feats = " ".join(f"{j + 1}:{float(row[j])!r}" for j in nz.tolist())
        out.append(f"{lab} {feats}".rstrip())
    return "".join(line + "\n" for line in out)


@dataclass(frozen=True, eq=False)
class BinningMap:
    """Per-feature cut points and bin representatives.

    ``cuts[d]`` has one entry fewer than ``representatives[d]``; value v falls in
    bin ``#{c in cuts[d] : c <= v}``.
    """

    cuts: tuple
    representatives: tuple

    @property
    def num_features(self) -> int:
        return len(self.cuts)

    @property
    def n_bins(self) -> np.ndarray:
        return np.array([len(r) for r in self.representatives], dtype=np.int64)

    def bin_values(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] < self.num_features:
            X = np.pad(X, ((0, 0), (0, self.num_features - X.shape[1])))
        out = np.empty((X.shape[0], self.num_features), dtype=np.int32)
        for d, c in enumerate(self.cuts):
            out[:, d] = np.searchsorted(c, X[:, d], side="right")
        return out

    def to_raw(self, bins: Sequence[int]) -> np.ndarray:
        return np.array([self.representatives[d][b] for d, b in enumerate(bins)])

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinningMap):
            return NotImplemented
        return len(self.cuts) == len(other.cuts) and all(
            np.array_equal(a, b) and np.array_equal(c, d)
            for a, b, c, d in zip(self.cuts, other.cuts, self.representatives, other.representatives)
        )


@dataclass(frozen=True, eq=False)
class BinnedDataset:
    X: np.ndarray  # N x D int32 bin indices
    labels: np.ndarray
    bins: BinningMap = field(repr=False)

    def __len__(self) -> int:
        return len(self.labels)


def _feature_bins(column: np.ndarray, max_bins: int) -> tuple[np.ndarray, np.ndarray]:
    vals, counts = np.unique(column, return_counts=True)
    if len(vals) <= max_bins:
        return _frozen((vals[1:] + vals[:-1]) / 2.0), _frozen(vals)
    # quantile merge: a distinct value goes to the bin its first instance would occupy
    start = np.concatenate(([0], np.cumsum(counts)[:-1]))
    group = np.minimum(start * max_bins // len(column), max_bins - 1)
    first = np.concatenate(([True], group[1:] != group[:-1]))
    last = np.concatenate((group[1:] != group[:-1], [True]))
    reps = vals[first]
    cuts = (vals[last][:-1] + vals[first][1:]) / 2.0
    return _frozen(cuts), _frozen(reps)


def build_bins(data: RawDataset, max_bins: int = DEFAULT_MAX_BINS) -> BinningMap:
    if max_bins < 1:
        raise ConfigError(f"max_bins must be positive, got {max_bins}")
    if len(data) == 0:
        raise ConfigError("cannot build bins on an empty dataset")
    X = data.to_dense()
    cuts, reps = zip(*(_feature_bins(X[:, d], max_bins) for d in range(X.shape[1]))) if X.shape[1] else ((), ())
    return BinningMap(tuple(cuts), tuple(reps))


def apply_bins(data: RawDataset, bins: BinningMap) -> BinnedDataset:
    X = bins.bin_values(data.to_dense(bins.num_features))
    return BinnedDataset(_frozen(X), data.labels, bins)
