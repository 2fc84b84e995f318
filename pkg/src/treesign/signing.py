"""Fragile signatures embedded in tree leaf values.

Pipeline: `locate_candidates` searches the trees (no data needed) for inputs
whose top two class scores nearly tie; `select_keys` keeps an independent
subset, each owning a leaf that no other candidate reaches; `embed` pushes
the owned leaf of every 1-bit key just far enough to swap its top two classes.
`extract` reads the bits back through any predicted-class oracle.
"""
from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numba
import numpy as np

from .booster import Ensemble, RegressionTree, predict_class
from .model_io import fingerprint

INF = math.inf
DEFAULT_EPSILON = 1e-5
GLOBAL = "global"
PER_DFS = "per_dfs"
LOCAL_BEST = "local_best"
ALL_STEPS = "all_steps"


class SearchError(RuntimeError):
    pass


class SelectionError(RuntimeError):
    pass


class EmbedError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------- boxes


@dataclass(frozen=True)
class ConstraintBox:
    """Per-feature half-open bin intervals ``[lo_d, hi_d)``; ``hi_d`` may be inf."""

    lo: tuple
    hi: tuple

    @classmethod
    def full(cls, num_features: int) -> "ConstraintBox":
        return cls((0,) * num_features, (INF,) * num_features)

    @property
    def is_empty(self) -> bool:
        return any(l >= h for l, h in zip(self.lo, self.hi))

    def intersect(self, other: "ConstraintBox") -> "ConstraintBox":
        return ConstraintBox(
            tuple(map(max, self.lo, other.lo)), tuple(map(min, self.hi, other.hi))
        )

    def contains(self, bins: Sequence[int]) -> bool:
        return all(l <= b < h for b, l, h in zip(bins, self.lo, self.hi))

    def covers(self, other: "ConstraintBox") -> bool:
        return all(a <= c and d <= b for a, b, c, d in zip(self.lo, self.hi, other.lo, other.hi))

    def sample(self, rng: np.random.Generator, n_bins: Sequence[int]) -> tuple:
        """Uniform bin vector inside the box, clipped to ``[0, n_bins)`` per feature."""
        return tuple(
            int(rng.integers(l, min(h, nb) if min(h, nb) > l else l + 1))
            for l, h, nb in zip(self.lo, self.hi, n_bins)
        )


def leaf_constraint(tree: RegressionTree, leaf_id: int, num_features: int) -> ConstraintBox:
    """Intersection of the split conditions on the path from the root to `leaf_id`."""
    if not (0 <= leaf_id < tree.n_nodes and tree.is_leaf(leaf_id)):
        raise ValueError(f"node {leaf_id} is not a leaf")
    lo, hi = [0] * num_features, [INF] * num_features
    par = tree.parents()
    node = leaf_id
    while par[node] >= 0:
        p = par[node]
        d, t = int(tree.feature[p]), int(tree.threshold[p])
        if tree.left[p] == node:
            hi[d] = min(hi[d], t + 1)
        else:
            lo[d] = max(lo[d], t + 1)
        node = p
    return ConstraintBox(tuple(lo), tuple(hi))


def _top_two(F: Sequence[float]) -> tuple[int, int]:
    """0-based (argmax, runner-up), ties to the smaller index."""
    order = sorted(range(len(F)), key=lambda c: (-F[c], c))
    return order[0], order[1]


def candidate_gap(model: Ensemble, box: ConstraintBox):
    """(top class, runner-up class, gap, scores) for a box that fixes every tree's leaf."""
    if box.is_empty:
        raise SearchError("empty constraint box")
    point = np.array([box.lo], dtype=np.int64)
    F = np.zeros(model.num_classes)
    for m, k, tree in model.iter_trees():
        leaf = int(tree.apply(point)[0])
        if not leaf_constraint(tree, leaf, model.num_features).covers(box):
            raise SearchError(f"box straddles several leaves of tree ({m},{k})")
        F[k] += tree.value[leaf]
    top, second = _top_two(F)
    return top + 1, second + 1, float(F[top] - F[second]), F


# ---------------------------------------------------------------- search


@dataclass(frozen=True, eq=False)
class KeyCandidate:
    box: ConstraintBox
    bins: tuple
    instance: np.ndarray = field(repr=False)
    leaves: np.ndarray = field(repr=False)  # leaves[m, k]: leaf id reached in tree (m, k)
    scores: tuple = field(repr=False)
    top: int
    runner_up: int
    gap: float


_NO_BOUND = np.int64(2**62)


@numba.njit(cache=True)
def _feasible_leaves(off, feat, thr, left, right, lo, hi, out):
    """Leaves of one tree whose region meets the box [lo, hi); returns their count."""
    n = 0
    stack = np.empty(64, np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        f = feat[off + node]
        if f < 0:
            out[n] = node
            n += 1
            continue
        t = thr[off + node]
        if top + 2 > stack.shape[0]:
            grown = np.empty(stack.shape[0] * 2, np.int64)
            grown[:top] = stack[:top]
            stack = grown
        if hi[f] > t + 1:
            stack[top] = right[off + node]
            top += 1
        if lo[f] <= t:
            stack[top] = left[off + node]
            top += 1
    return n


@numba.njit(cache=True)
def _random_dfs(off, feat, thr, left, right, parent, val, M, K, D, max_leaves,
                n_runs, max_steps, per_dfs, cap, seed, local_best):
    np.random.seed(seed)
    T = M * K
    lo_s = np.zeros((T + 1, D), np.int64)
    hi_s = np.full((T + 1, D), _NO_BOUND, np.int64)
    feas = np.empty((max(T, 1), max_leaves), np.int64)
    nfeas = np.zeros(max(T, 1), np.int64)
    pos = np.zeros(max(T, 1), np.int64)
    path = np.zeros(max(T, 1), np.int64)
    acc = np.zeros(max(T, 1))
    F = np.zeros(K)

    h_gap = np.empty(cap)
    h_path = np.zeros((cap, max(T, 1)), np.int64)
    h_lo = np.zeros((cap, D), np.int64)
    h_hi = np.zeros((cap, D), np.int64)
    h_F = np.zeros((cap, K))
    count = 0
    worst = 0
    steps = 0
    b_path = np.zeros(max(T, 1), np.int64)
    b_lo = np.zeros(D, np.int64)
    b_hi = np.zeros(D, np.int64)
    b_F = np.zeros(K)

    for run in range(n_runs):
        if not per_dfs and steps >= max_steps:
            break
        used = 0
        b_gap = np.inf
        t = 0
        if T > 0:
            nfeas[0] = _feasible_leaves(off[0], feat, thr, left, right, lo_s[0], hi_s[0], feas[0])
            pos[0] = 0
            for i in range(nfeas[0] - 1, 0, -1):
                j = np.random.randint(0, i + 1)
                feas[0, i], feas[0, j] = feas[0, j], feas[0, i]
        while t >= 0:
            complete = T == 0
            if not complete:
                if pos[t] >= nfeas[t]:
                    t -= 1
                    continue
                leaf = feas[t, pos[t]]
                pos[t] += 1
                o = off[t]
                for d in range(D):
                    lo_s[t + 1, d] = lo_s[t, d]
                    hi_s[t + 1, d] = hi_s[t, d]
                node = leaf
                while parent[o + node] >= 0:
                    p = parent[o + node]
                    f = feat[o + p]
                    if left[o + p] == node:
                        if thr[o + p] + 1 < hi_s[t + 1, f]:
                            hi_s[t + 1, f] = thr[o + p] + 1
                    elif thr[o + p] + 1 > lo_s[t + 1, f]:
                        lo_s[t + 1, f] = thr[o + p] + 1
                    node = p
                path[t] = leaf
                if t % M == 0:
                    acc[t] = val[o + leaf]
                else:
                    acc[t] = acc[t - 1] + val[o + leaf]
                complete = t == T - 1
            if not complete:
                t += 1
                nfeas[t] = _feasible_leaves(off[t], feat, thr, left, right, lo_s[t], hi_s[t], feas[t])
                pos[t] = 0
                for i in range(nfeas[t] - 1, 0, -1):
                    j = np.random.randint(0, i + 1)
                    feas[t, i], feas[t, j] = feas[t, j], feas[t, i]
                continue

            # complete assignment: score it and offer it to the heap
            for k in range(K):
                F[k] = acc[k * M + M - 1] if M > 0 else 0.0
            a = 0
            for k in range(1, K):
                if F[k] > F[a]:
                    a = k
            b = 1 if a == 0 else 0
            for k in range(K):
                if k != a and F[k] > F[b]:
                    b = k
            gap = F[a] - F[b]
            if local_best:
                if gap < b_gap:
                    b_gap = gap
                    b_path[:T] = path[:T]
                    b_lo[:] = lo_s[T]
                    b_hi[:] = hi_s[T]
                    b_F[:] = F
            else:
                count, worst = _offer(gap, path, lo_s[T], hi_s[T], F, T, D,
                                      h_gap, h_path, h_lo, h_hi, h_F, count, worst, cap)
            steps += 1
            used += 1
            if per_dfs:
                if used >= max_steps:
                    break
            elif steps >= max_steps:
                break
            if T == 0:
                break
        if local_best and b_gap < np.inf:
            count, worst = _offer(b_gap, b_path, b_lo, b_hi, b_F, T, D,
                                  h_gap, h_path, h_lo, h_hi, h_F, count, worst, cap)
    return h_gap[:count], h_path[:count, :T], h_lo[:count], h_hi[:count], h_F[:count], steps


@numba.njit(cache=True)
def _offer(gap, path, lo, hi, F, T, D, h_gap, h_path, h_lo, h_hi, h_F, count, worst, cap):
    """Insert into the bounded max-gap heap unless it is full of better entries or a duplicate."""
    if count == cap and gap >= h_gap[worst]:
        return count, worst
    for e in range(count):
        if h_gap[e] == gap:
            same = True
            for d in range(D):
                if h_lo[e, d] != lo[d]:
                    same = False
                    break
            if same:
                return count, worst
    slot = count if count < cap else worst
    if count < cap:
        count += 1
    h_gap[slot] = gap
    h_path[slot, :T] = path[:T]
    h_lo[slot] = lo
    h_hi[slot] = hi
    h_F[slot] = F
    worst = 0
    for e in range(1, count):
        if h_gap[e] > h_gap[worst]:
            worst = e
    return count, worst


def _flatten(model: Ensemble, order):
    trees = [model.trees[m][k] for m, k in order]
    sizes = [t.n_nodes for t in trees]
    off = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64) if trees else np.zeros(0, np.int64)

    def cat(attr):
        parts = [getattr(t, attr) for t in trees]
        return np.concatenate(parts) if parts else np.zeros(0)

    parent = np.concatenate([t.parents() for t in trees]) if trees else np.zeros(0, np.int64)
    return (
        off,
        cat("feature").astype(np.int64),
        cat("threshold").astype(np.int64),
        cat("left").astype(np.int64),
        cat("right").astype(np.int64),
        parent.astype(np.int64),
        cat("value").astype(float),
        max([t.n_leaves for t in trees], default=1),
    )


def locate_candidates(
    model: Ensemble,
    S: int = 40,
    alpha: int = 8,
    max_steps: int = 1000,
    seed: int = 0,
    step_scope: str = PER_DFS,
    pool: str = LOCAL_BEST,
) -> list[KeyCandidate]:
    """Run S*alpha Random-DFS passes, keeping the S*alpha smallest-gap leaf assignments.

    `max_steps` bounds complete assignments per pass (``per_dfs``) or across all
    passes (``global``). Candidates come back sorted by (gap, bins) and are
    distinct by representative instance.
    """
    if S < 1 or alpha < 1 or max_steps < 1:
        raise ValueError("S, alpha and max_steps must all be at least 1")
    if step_scope not in (PER_DFS, GLOBAL):
        raise ValueError(f"step_scope must be {PER_DFS!r} or {GLOBAL!r}")
    if pool not in (LOCAL_BEST, ALL_STEPS):
        raise ValueError(f"pool must be {LOCAL_BEST!r} or {ALL_STEPS!r}")
    if model.num_classes < 2:
        raise SearchError("need at least two classes to define a gap")
    M, K, D = model.num_iterations, model.num_classes, model.num_features
    order = [(m, k) for k in range(K) for m in range(M)]  # class-major, as the DFS walks
    off, feat, thr, left, right, parent, val, max_leaves = _flatten(model, order)
    gaps, paths, los, his, Fs, _ = _random_dfs(
        off, feat, thr, left, right, parent, val, M, K, D, max_leaves,
        S * alpha, max_steps, step_scope == PER_DFS, S * alpha, seed, pool == LOCAL_BEST,
    )
    if len(gaps) == 0:
        raise SearchError("no complete leaf assignment found")
    found = []
    for gap, path, lo, hi, F in zip(gaps, paths, los, his, Fs):
        leaves = np.zeros((M, K), dtype=np.int64)
        for (m, k), leaf in zip(order, path):
            leaves[m, k] = leaf
        leaves.flags.writeable = False
        bins = tuple(int(b) for b in lo)
        x = model.bins.to_raw(bins)
        x.flags.writeable = False
        top, second = _top_two(F)
        found.append(
            KeyCandidate(
                box=ConstraintBox(bins, tuple(INF if h == _NO_BOUND else int(h) for h in hi)),
                bins=bins,
                instance=x,
                leaves=leaves,
                scores=tuple(float(f) for f in F),
                top=top + 1,
                runner_up=second + 1,
                gap=float(gap),
            )
        )
    found.sort(key=lambda c: (c.gap, c.bins))
    return found


# ---------------------------------------------------------------- keys & messages


@dataclass(frozen=True)
class FreeLeaf:
    iteration: int  # 0-based
    cls: int  # 1-based class label of the tree
    node: int


@dataclass(frozen=True, eq=False)
class SignatureKey:
    instance: np.ndarray = field(repr=False)
    bins: tuple
    scores: tuple = field(repr=False)
    top: int
    runner_up: int
    gap: float
    leaf: FreeLeaf

    @property
    def direction(self) -> int:
        """+1 raises the runner-up's leaf, -1 lowers the top class's leaf."""
        return 1 if self.leaf.cls == self.runner_up else -1

    def __eq__(self, other):
        if not isinstance(other, SignatureKey):
            return NotImplemented
        return (
            np.array_equal(self.instance, other.instance)
            and (self.bins, self.scores, self.top, self.runner_up, self.gap, self.leaf)
            == (other.bins, other.scores, other.top, other.runner_up, other.gap, other.leaf)
        )


@dataclass(frozen=True)
class SignatureKeySet:
    keys: tuple
    fingerprint: str | None = None
    epsilon: float = DEFAULT_EPSILON

    def __len__(self) -> int:
        return len(self.keys)

    def __iter__(self) -> Iterator[SignatureKey]:
        return iter(self.keys)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return SignatureKeySet(self.keys[i], self.fingerprint, self.epsilon)
        return self.keys[i]


@dataclass(frozen=True)
class SignatureMessage:
    bits: tuple

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("message bits must be 0 or 1")

    @classmethod
    def from_str(cls, s: str) -> "SignatureMessage":
        if set(s) - {"0", "1"}:
            raise ValueError(f"not a bit string: {s!r}")
        return cls(tuple(int(c) for c in s))

    @classmethod
    def zeros(cls, n: int) -> "SignatureMessage":
        return cls((0,) * n)

    @classmethod
    def ones(cls, n: int) -> "SignatureMessage":
        return cls((1,) * n)

    @classmethod
    def random(cls, n: int, seed: int = 0) -> "SignatureMessage":
        rng = random.Random(seed)
        return cls(tuple(rng.randint(0, 1) for _ in range(n)))

    @classmethod
    def from_int(cls, value: int, n: int) -> "SignatureMessage":
        return cls(tuple((value >> i) & 1 for i in range(n)))

    def __len__(self) -> int:
        return len(self.bits)

    def __str__(self) -> str:
        return "".join(map(str, self.bits))


def _third_class_clear(scores, top, second, gap, epsilon) -> bool:
    """Every other class stays more than gap + 2*epsilon below the runner-up."""
    rest = [s for c, s in enumerate(scores) if c not in (top, second)]
    return not rest or scores[second] - max(rest) >= gap + 2 * epsilon


def select_keys(
    candidates: Sequence[KeyCandidate],
    S: int,
    epsilon: float = DEFAULT_EPSILON,
    fingerprint: str | None = None,
) -> SignatureKeySet:
    """Greedy independent subset of at most S candidates.

    A candidate is taken when some leaf on one of its top-two class trees is
    reached by no other candidate; that leaf becomes its free leaf. Leaves are
    scanned in tree (m, k) order, then by leaf id.
    """
    if S < 1:
        raise ValueError("S must be at least 1")
    ref_freq: dict = {}
    owner: dict = {}
    for ci, cand in enumerate(candidates):
        M, K = cand.leaves.shape
        for m in range(M):
            for k in range(K):
                key = (m, k, int(cand.leaves[m, k]))
                ref_freq[key] = ref_freq.get(key, 0) + 1
                owner[key] = ci
    chosen: dict = {}
    for key in sorted(ref_freq):
        if len(chosen) >= S:
            break
        if ref_freq[key] != 1:
            continue
        ci = owner[key]
        if ci in chosen:
            continue
        cand = candidates[ci]
        m, k, node = key
        if k + 1 not in (cand.top, cand.runner_up):
            continue
        if not _third_class_clear(cand.scores, cand.top - 1, cand.runner_up - 1, cand.gap, epsilon):
            continue
        chosen[ci] = SignatureKey(
            instance=cand.instance,
            bins=cand.bins,
            scores=tuple(cand.scores),
            top=cand.top,
            runner_up=cand.runner_up,
            gap=cand.gap,
            leaf=FreeLeaf(m, k + 1, node),
        )
    if not chosen:
        raise SelectionError("no independent key found; try a larger alpha")
    return SignatureKeySet(tuple(chosen.values()), fingerprint, epsilon)


# ---------------------------------------------------------------- embedding


def _exact_step(value: float, step: float) -> float:
    """A delta close to `step` with ``(value + d) - d == value`` exactly."""
    target = value + step
    for _ in range(64):
        d = target - value
        if value + d == target and target - d == value and abs(d) >= abs(step) * (1 - 1e-12):
            return d
        target = math.nextafter(target, math.copysign(INF, step))
    return step


def perturbation(model: Ensemble, key: SignatureKey, epsilon: float | None = None) -> float:
    """Signed change to the key's free leaf that swaps its top two classes."""
    eps = DEFAULT_EPSILON if epsilon is None else epsilon
    if eps <= 0:
        raise EmbedError(f"epsilon must be positive, got {eps}")
    lf = key.leaf
    value = float(model.trees[lf.iteration][lf.cls - 1].value[lf.node])
    return _exact_step(value, key.direction * (key.gap + eps))


def _require_fingerprint(model, keys):
    if keys.fingerprint is not None and fingerprint(model) != keys.fingerprint:
        raise EmbedError("keys were selected on a different model (fingerprint mismatch)")


def _with_leaf_deltas(model: Ensemble, deltas: dict) -> Ensemble:
    from dataclasses import replace

    rows = [list(row) for row in model.trees]
    for (m, k), changes in deltas.items():
        value = np.array(rows[m][k].value)
        for node, d in changes:
            value[node] = value[node] + d
        rows[m][k] = rows[m][k].with_values(value)
    return replace(model, trees=tuple(tuple(r) for r in rows))


def embed(
    model: Ensemble,
    keys: SignatureKeySet,
    message: SignatureMessage,
    epsilon: float | None = None,
) -> Ensemble:
    """Signed copy of `model`: every 1-bit key's free leaf moves by gap + epsilon."""
    eps = keys.epsilon if epsilon is None else epsilon
    if eps <= 0:
        raise EmbedError(f"epsilon must be positive, got {eps}")
    if len(message) != len(keys):
        raise ProtocolError(f"message has {len(message)} bits for {len(keys)} keys")
    _require_fingerprint(model, keys)
    changes: dict = {}
    for key, bit in zip(keys, message.bits):
        if not bit:
            continue
        if not _third_class_clear(key.scores, key.top - 1, key.runner_up - 1, key.gap, eps):
            raise EmbedError(f"key {key.bins}: a third class is too close to the runner-up")
        lf = key.leaf
        changes.setdefault((lf.iteration, lf.cls - 1), []).append((lf.node, perturbation(model, key, eps)))
    if not changes:
        return model
    return _with_leaf_deltas(model, changes)


def applied_perturbations(model: Ensemble, keys: SignatureKeySet, message: SignatureMessage, epsilon=None):
    """Per-key delta that `embed` adds for a 1 bit (0.0 for 0 bits)."""
    eps = keys.epsilon if epsilon is None else epsilon
    return tuple(perturbation(model, k, eps) if b else 0.0 for k, b in zip(keys, message.bits))


def unembed(signed: Ensemble, keys: SignatureKeySet, deltas: Sequence[float]) -> Ensemble:
    """Subtract recorded perturbations; restores the unsigned model exactly."""
    changes: dict = {}
    for key, d in zip(keys, deltas):
        if d:
            lf = key.leaf
            changes.setdefault((lf.iteration, lf.cls - 1), []).append((lf.node, -d))
    return _with_leaf_deltas(signed, changes) if changes else signed


# ---------------------------------------------------------------- extraction


@dataclass(frozen=True)
class Extraction:
    message: SignatureMessage
    tampered: bool
    responses: tuple = ()


class Verdict(enum.Enum):
    AUTHENTIC = "authentic"
    TAMPERED = "tampered"


def model_predictor(model: Ensemble) -> Callable[[np.ndarray], int]:
    return lambda x: predict_class(model, x)


def extract(predictor: Callable[[np.ndarray], int], keys: SignatureKeySet) -> Extraction:
    """Query the predicted class of every key; a third-class answer counts as 1 and flags tampering."""
    bits, responses, tampered = [], [], False
    for key in keys:
        cls = int(predictor(np.asarray(key.instance)))
        responses.append(cls)
        if cls == key.top:
            bits.append(0)
        else:
            bits.append(1)
            tampered |= cls != key.runner_up
    return Extraction(SignatureMessage(tuple(bits)), tampered, tuple(responses))


def verify(extracted: Extraction, expected: SignatureMessage) -> Verdict:
    if len(extracted.message) != len(expected):
        raise ProtocolError(f"extracted {len(extracted.message)} bits, expected {len(expected)}")
    if extracted.tampered or extracted.message.bits != expected.bits:
        return Verdict.TAMPERED
    return Verdict.AUTHENTIC
