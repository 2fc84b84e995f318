"""Line-oriented text formats for models (``.tsm``) and signature keys (``.tsk``).

Floats are written with ``repr`` (shortest round-trip decimal), so loading
reproduces every stored value bit for bit and saving is byte-stable.

Model file::

    treesign-model 1
    classes K / iterations M / learning_rate / leaves J / criterion / damping / seed
    features D
    bin <d> <n> <rep_0> ... <rep_n-1>
    cut <d> <c_1> ... <c_n-1>
    tree <m> <k> <n_nodes>
    <id> split <feature> <threshold> <left> <right>
    <id> leaf <value>
    end

Features and node ids are 0-based; class labels are 1-based and iterations
0-based wherever a key file names a leaf.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .booster import CRITERIA, Ensemble, make_tree
from .data import BinningMap

MODEL_MAGIC = "treesign-model"
KEYS_MAGIC = "treesign-keys"
VERSION = 1


class FormatError(ValueError):
    pass


class IntegrityError(FormatError):
    pass


class WrongModelError(ValueError):
    pass


def _f(x: float) -> str:
    return repr(float(x))


def dumps_model(model: Ensemble) -> str:
    out = [
        f"{MODEL_MAGIC} {VERSION}",
        f"classes {model.num_classes}",
        f"iterations {model.num_iterations}",
        f"learning_rate {_f(model.learning_rate)}",
        f"leaves {model.num_leaves}",
        f"criterion {model.criterion}",
        f"damping {_f(model.damping)}",
        f"seed {model.seed}",
        f"features {model.num_features}",
    ]
    for d, (reps, cuts) in enumerate(zip(model.bins.representatives, model.bins.cuts)):
        out.append(" ".join([f"bin {d} {len(reps)}", *map(_f, reps)]).rstrip())
        out.append(" ".join([f"cut {d}", *map(_f, cuts)]).rstrip())
    for m, k, tree in model.iter_trees():
        out.append(f"tree {m} {k} {tree.n_nodes}")
        for n in range(tree.n_nodes):
            if tree.feature[n] < 0:
                out.append(f"{n} leaf {_f(tree.value[n])}")
            else:
                out.append(f"{n} split {tree.feature[n]} {tree.threshold[n]} {tree.left[n]} {tree.right[n]}")
    out.append("end")
    return "\n".join(out) + "\n"


def save_model(model: Ensemble, sink=None) -> bytes:
    """Serialize `model`; write to `sink` (path or binary file) when given."""
    data = dumps_model(model).encode()
    if sink is not None:
        if hasattr(sink, "write"):
            sink.write(data)
        else:
            Path(sink).write_bytes(data)
    return data


def fingerprint(model: Ensemble) -> str:
    return hashlib.sha256(save_model(model)).hexdigest()


class _Lines:
    def __init__(self, text: str):
        self.lines = text.split("\n")
        self.i = 0

    def next(self, what: str) -> list[str]:
        while self.i < len(self.lines):
            line = self.lines[self.i].strip()
            self.i += 1
            if line:
                return line.split()
        raise IntegrityError(f"truncated file: expected {what}")

    def field(self, name: str) -> str:
        tok = self.next(name)
        if tok[0] != name or len(tok) != 2:
            raise IntegrityError(f"line {self.i}: expected '{name} <value>', got {' '.join(tok)!r}")
        return tok[1]


def _check_magic(lines: _Lines, magic: str):
    tok = lines.next("header")
    if tok[0] != magic:
        raise FormatError(f"not a {magic} file")
    if len(tok) != 2 or tok[1] != str(VERSION):
        raise FormatError(f"unsupported {magic} version {tok[1:]!r}, expected {VERSION}")


def _validate_tree(m, k, feature, threshold, left, right, n_bins):
    n = len(feature)
    parent = [-1] * n
    for i in range(n):
        if feature[i] < 0:
            continue
        if not 0 <= feature[i] < len(n_bins):
            raise IntegrityError(f"tree ({m},{k}) node {i}: feature {feature[i]} out of range")
        if not 0 <= threshold[i] < n_bins[feature[i]]:
            raise IntegrityError(f"tree ({m},{k}) node {i}: threshold {threshold[i]} is not a valid bin")
        for child in (left[i], right[i]):
            if not 0 <= child < n:
                raise IntegrityError(f"tree ({m},{k}) node {i}: child {child} out of range")
            if child == 0 or parent[child] != -1:
                raise IntegrityError(f"tree ({m},{k}) node {i}: child {child} has more than one parent")
            parent[child] = i
    seen, stack = set(), [0]
    while stack:
        i = stack.pop()
        seen.add(i)
        if feature[i] >= 0:
            stack += [left[i], right[i]]
    if len(seen) != n:
        missing = min(set(range(n)) - seen)
        raise IntegrityError(f"tree ({m},{k}) node {missing}: unreachable from the root")


def loads_model(text: str | bytes) -> Ensemble:
    if isinstance(text, bytes):
        text = text.decode()
    L = _Lines(text)
    _check_magic(L, MODEL_MAGIC)
    try:
        K = int(L.field("classes"))
        M = int(L.field("iterations"))
        nu = float(L.field("learning_rate"))
        J = int(L.field("leaves"))
        criterion = L.field("criterion")
        damping = float(L.field("damping"))
        seed = int(L.field("seed"))
        D = int(L.field("features"))
        reps, cuts = [], []
        for d in range(D):
            tok = L.next("bin")
            if tok[:2] != ["bin", str(d)] or len(tok) != 3 + int(tok[2]):
                raise IntegrityError(f"line {L.i}: malformed bin record for feature {d}")
            reps.append(np.array([float(x) for x in tok[3:]]))
            tok = L.next("cut")
            if tok[:2] != ["cut", str(d)] or len(tok) - 2 != max(len(reps[-1]) - 1, 0):
                raise IntegrityError(f"line {L.i}: malformed cut record for feature {d}")
            cuts.append(np.array([float(x) for x in tok[2:]]))
        for a in reps + cuts:
            a.flags.writeable = False
        bins = BinningMap(tuple(cuts), tuple(reps))
        n_bins = [len(r) for r in reps]

        rows = []
        for m in range(M):
            row = []
            for k in range(K):
                tok = L.next("tree")
                if tok[:3] != ["tree", str(m), str(k)] or len(tok) != 4:
                    raise IntegrityError(f"line {L.i}: expected tree {m} {k}")
                n = int(tok[3])
                feature, threshold = [-1] * n, [-1] * n
                left, right, value = [-1] * n, [-1] * n, [0.0] * n
                for i in range(n):
                    tok = L.next(f"node {i} of tree ({m},{k})")
                    if tok[0] != str(i):
                        raise IntegrityError(f"tree ({m},{k}): expected node {i}, got {tok[0]}")
                    if tok[1] == "leaf" and len(tok) == 3:
                        value[i] = float(tok[2])
                    elif tok[1] == "split" and len(tok) == 6:
                        feature[i], threshold[i], left[i], right[i] = map(int, tok[2:])
                    else:
                        raise IntegrityError(f"tree ({m},{k}) node {i}: malformed record")
                _validate_tree(m, k, feature, threshold, left, right, n_bins)
                row.append(make_tree(feature, threshold, left, right, value))
            rows.append(tuple(row))
        if L.next("end") != ["end"]:
            raise IntegrityError(f"line {L.i}: expected end of model")
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise IntegrityError(f"line {L.i}: {exc}") from None
    if criterion not in CRITERIA:
        raise IntegrityError(f"unknown criterion {criterion!r}")
    return Ensemble(K, nu, J, criterion, damping, seed, bins, tuple(rows))


def load_model(source) -> Ensemble:
    """Load from bytes/str content or from a path."""
    if isinstance(source, (bytes, str)) and (
        isinstance(source, bytes) or source.startswith(MODEL_MAGIC)
    ):
        return loads_model(source)
    return loads_model(Path(source).read_bytes())


# ---------------------------------------------------------------- key files


@dataclass(frozen=True)
class KeyFile:
    keys: "SignatureKeySet"
    message: "SignatureMessage"
    deltas: tuple  # realized per-key leaf perturbation for a 1 bit


def dumps_keys(keys, message, deltas=None) -> str:
    from .signing import SignatureMessage

    if len(message) != len(keys):
        raise ValueError(f"message has {len(message)} bits for {len(keys)} keys")
    deltas = deltas if deltas is not None else [0.0] * len(keys)
    out = [
        f"{KEYS_MAGIC} {VERSION}",
        f"model {keys.fingerprint or '-'}",
        f"epsilon {_f(keys.epsilon)}",
        f"keys {len(keys)}",
    ]
    for i, (key, delta) in enumerate(zip(keys, deltas)):
        lf = key.leaf
        out.append(
            f"key {i} top {key.top} flip {key.runner_up} gap {_f(key.gap)} "
            f"leaf {lf.iteration} {lf.cls} {lf.node} delta {_f(delta)}"
        )
        out.append(" ".join([f"x {i}", *map(_f, key.instance)]).rstrip())
        out.append(" ".join([f"b {i}", *map(str, key.bins)]).rstrip())
        out.append(" ".join([f"F {i}", *map(_f, key.scores)]))
    out.append(f"message {SignatureMessage(message.bits) if len(message) else '-'}")
    out.append("end")
    return "\n".join(out) + "\n"


def save_keys(keys, message, sink=None, deltas=None) -> bytes:
    data = dumps_keys(keys, message, deltas).encode()
    if sink is not None:
        if hasattr(sink, "write"):
            sink.write(data)
        else:
            Path(sink).write_bytes(data)
    return data


def loads_keys(text: str | bytes, expect_fingerprint: str | None = None) -> KeyFile:
    from .signing import FreeLeaf, SignatureKey, SignatureKeySet, SignatureMessage

    if isinstance(text, bytes):
        text = text.decode()
    L = _Lines(text)
    _check_magic(L, KEYS_MAGIC)
    try:
        fp = L.field("model")
        fp = None if fp == "-" else fp
        eps = float(L.field("epsilon"))
        S = int(L.field("keys"))
        keys, deltas = [], []
        for i in range(S):
            tok = L.next(f"key {i}")
            if (
                len(tok) != 14
                or tok[:2] != ["key", str(i)]
                or [tok[2], tok[4], tok[6], tok[8], tok[12]] != ["top", "flip", "gap", "leaf", "delta"]
            ):
                raise IntegrityError(f"line {L.i}: malformed key record")
            top, flip, gap = int(tok[3]), int(tok[5]), float(tok[7])
            leaf = FreeLeaf(int(tok[9]), int(tok[10]), int(tok[11]))
            deltas.append(float(tok[13]))
            rec = {}
            for tag in ("x", "b", "F"):
                t = L.next(f"{tag} {i}")
                if t[:2] != [tag, str(i)]:
                    raise IntegrityError(f"line {L.i}: expected '{tag} {i}'")
                rec[tag] = t[2:]
            x = np.array([float(v) for v in rec["x"]])
            x.flags.writeable = False
            keys.append(
                SignatureKey(
                    instance=x,
                    bins=tuple(int(v) for v in rec["b"]),
                    scores=tuple(float(v) for v in rec["F"]),
                    top=top,
                    runner_up=flip,
                    gap=gap,
                    leaf=leaf,
                )
            )
        bits = L.field("message")
        message = SignatureMessage.from_str("" if bits == "-" else bits)
        if L.next("end") != ["end"]:
            raise IntegrityError(f"line {L.i}: expected end of key file")
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise IntegrityError(f"line {L.i}: {exc}") from None
    if len(message) != S:
        raise IntegrityError(f"message has {len(message)} bits for {S} keys")
    if expect_fingerprint is not None and fp != expect_fingerprint:
        raise WrongModelError(f"key file is bound to model {fp}, not {expect_fingerprint}")
    return KeyFile(SignatureKeySet(tuple(keys), fp, eps), message, tuple(deltas))


def load_keys(source, expect_fingerprint: str | None = None) -> KeyFile:
    if isinstance(source, bytes) or (isinstance(source, str) and source.startswith(KEYS_MAGIC)):
        return loads_keys(source, expect_fingerprint)
    return loads_keys(Path(source).read_bytes(), expect_fingerprint)
