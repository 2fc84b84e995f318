"""Baseline tampering of a signed ensemble and how much of the signature survives.

`attack_append` and `attack_remove` model an adversary who keeps boosting or
trims the last iterations. `attack_noise` (uniform jitter on every leaf) is an
extra baseline used for coverage; it does not come from the original study.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .booster import Ensemble, continue_training, evaluate
from .data import RawDataset
from .signing import SignatureKeySet, SignatureMessage, Verdict, extract, model_predictor, verify

APPEND = "append"
REMOVE = "remove"
NOISE = "noise"
ATTACKS = (APPEND, REMOVE, NOISE)


def attack_append(signed: Ensemble, train_data: RawDataset, extra: int) -> Ensemble:
    """Keep boosting from the signed model's scores for `extra` more iterations."""
    return continue_training(signed, train_data, extra)


def attack_remove(signed: Ensemble, n: int) -> Ensemble:
    """Drop the last `n` iterations (n * K trees)."""
    if not 1 <= n < signed.num_iterations:
        raise ValueError(f"can remove 1..{signed.num_iterations - 1} iterations, got {n}")
    return replace(signed, trees=signed.trees[:-n], loss_history=signed.loss_history[:-n])


def attack_noise(signed: Ensemble, scale: float = 1e-3, seed: int = 0) -> Ensemble:
    """Add U(-scale, scale) noise to every leaf value."""
    rng = np.random.default_rng(seed)
    rows = []
    for row in signed.trees:
        new = []
        for tree in row:
            value = np.array(tree.value)
            leaves = tree.feature < 0
            value[leaves] += rng.uniform(-scale, scale, size=int(leaves.sum()))
            new.append(tree.with_values(value))
        rows.append(tuple(new))
    return replace(signed, trees=tuple(rows))


@dataclass(frozen=True)
class AttackReport:
    kind: str
    amount: float
    changed_fraction: float
    expected: tuple  # per key class implied by the stored message
    observed: tuple  # per key class answered by the attacked model
    verdict: Verdict
    accuracy_before: float | None = None
    accuracy_after: float | None = None
    params: dict = field(default_factory=dict)

    @property
    def n_changed(self) -> int:
        return sum(a != b for a, b in zip(self.expected, self.observed))

    def to_text(self) -> str:
        lines = [
            f"attack {self.kind} {self.amount:g}",
            f"keys {len(self.expected)} changed {self.n_changed} ({100 * self.changed_fraction:.1f}%)",
            f"verdict {self.verdict.value}",
        ]
        if self.accuracy_before is not None:
            lines.append(f"accuracy_before {self.accuracy_before:.6f}")
        if self.accuracy_after is not None:
            lines.append(f"accuracy_after {self.accuracy_after:.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "expected_class", "observed_class", "changed", "attack", "amount", "verdict"])
        for i, (a, b) in enumerate(zip(self.expected, self.observed)):
            w.writerow([i, a, b, int(a != b), self.kind, self.amount, self.verdict.value])
        return buf.getvalue()


def expected_classes(keys: SignatureKeySet, message: SignatureMessage) -> tuple:
    return tuple(k.runner_up if bit else k.top for k, bit in zip(keys, message.bits))


def measure_fragility(
    keys: SignatureKeySet,
    expected: SignatureMessage,
    attacked: Ensemble,
    test_data: RawDataset | None = None,
    reference: Ensemble | None = None,
    kind: str = "none",
    amount: float = 0,
) -> AttackReport:
    """Extract from `attacked` and compare against the enrolled message.

    Accuracies are filled in when `test_data` is given (``before`` also needs
    the pre-attack `reference` model).
    """
    ext = extract(model_predictor(attacked), keys)
    want = expected_classes(keys, expected)
    changed = sum(a != b for a, b in zip(want, ext.responses))
    acc_before = acc_after = None
    if test_data is not None:
        acc_after = evaluate(attacked, test_data)[0]
        if reference is not None:
            acc_before = evaluate(reference, test_data)[0]
    return AttackReport(
        kind=kind,
        amount=amount,
        changed_fraction=changed / len(keys) if len(keys) else 0.0,
        expected=want,
        observed=ext.responses,
        verdict=verify(ext, expected),
        accuracy_before=acc_before,
        accuracy_after=acc_after,
    )


def run_attack(kind: str, signed: Ensemble, n: float, train_data: RawDataset | None = None, seed: int = 0) -> Ensemble:
    if kind == APPEND:
        if train_data is None:
            raise ValueError("the append attack needs training data")
        return attack_append(signed, train_data, int(n))
    if kind == REMOVE:
        return attack_remove(signed, int(n))
    if kind == NOISE:
        return attack_noise(signed, float(n), seed)
    raise ValueError(f"unknown attack {kind!r}; expected one of {ATTACKS}")
