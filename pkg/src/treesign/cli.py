"""Command-line front end.

    treesign train   --data train.svm -J 20 -M 100 --model model.tsm
    treesign sign    --model model.tsm --signed-model signed.tsm --keys keys.tsk
    treesign verify  --keys keys.tsk --signed-model signed.tsm      # exit 0 authentic, 3 tampered
    treesign attack  --signed-model signed.tsm --keys keys.tsk --attack append --n 1 --data train.svm
    treesign eval    --model model.tsm --test test.svm [--signed-model signed.tsm]
    treesign inspect --model model.tsm
    treesign predict --model signed.tsm [--data instances.svm]      # black-box host
"""
from __future__ import annotations

import argparse
import logging
import shlex
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import attacks, booster, model_io, signing
from .data import DEFAULT_MAX_BINS, apply_bins, build_bins, format_instances, parse_libsvm, read_libsvm

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_TAMPERED = 3

log = logging.getLogger("treesign")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="treesign", description="Fragile signatures for boosted tree models.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a boosted tree model")
    p.add_argument("--data", required=True)
    p.add_argument("--test")
    p.add_argument("--model", required=True, help="output .tsm path")
    p.add_argument("-J", type=int, default=20, help="terminal nodes per tree")
    p.add_argument("-M", type=int, default=100, help="boosting iterations")
    p.add_argument("--nu", type=float, default=0.1)
    p.add_argument("--criterion", choices=booster.CRITERIA, default=booster.LOGIT)
    p.add_argument("--damping", type=float, default=booster.DEFAULT_DAMPING)
    p.add_argument("--max-bins", type=int, default=DEFAULT_MAX_BINS)
    p.add_argument("--report", help="write the per-iteration loss log here")
    _add_common(p)

    p = sub.add_parser("sign", help="locate and select keys, embed a message")
    p.add_argument("--model", required=True)
    p.add_argument("--signed-model", required=True)
    p.add_argument("--keys", required=True)
    p.add_argument("-S", type=int, default=40)
    p.add_argument("--alpha", type=int, default=8)
    p.add_argument("--max-steps", type=int, default=1000)
    p.add_argument("--epsilon", type=float, default=signing.DEFAULT_EPSILON)
    p.add_argument("--message", help="bit string; uses the first len(message) keys")
    _add_common(p)

    p = sub.add_parser("verify", help="authenticate a deployed model through predicted classes")
    p.add_argument("--keys", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--signed-model", help="local model file used as a black box")
    g.add_argument("--predictor-cmd", help="command reading LIBSVM lines on stdin, printing one class per line")
    p.add_argument("--model", help="original model; checks the key file is bound to it")
    _add_common(p)

    p = sub.add_parser("attack", help="tamper with a signed model and measure the damage")
    p.add_argument("--signed-model", required=True)
    p.add_argument("--keys", required=True)
    p.add_argument("--attack", choices=attacks.ATTACKS, required=True)
    p.add_argument("--n", type=float, default=1, help="iterations to append/remove, or noise scale")
    p.add_argument("--data", help="training data (append attack)")
    p.add_argument("--test")
    p.add_argument("--out", help="write the attacked model here")
    p.add_argument("--report", help="write a per-key CSV report here")
    _add_common(p)

    p = sub.add_parser("eval", help="accuracy and loss on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--signed-model", help="also count predictions that differ from --model")
    _add_common(p)

    p = sub.add_parser("inspect", help="summarize a model file")
    p.add_argument("--model", required=True)
    _add_common(p)

    p = sub.add_parser("predict", help="answer predicted classes for LIBSVM instances")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="instances file (default: stdin)")
    _add_common(p)
    return ap


def cmd_train(args) -> int:
    data = read_libsvm(args.data)
    binned = apply_bins(data, build_bins(data, args.max_bins))
    model = booster.train(
        binned, data.num_classes, args.M, args.J, args.nu, args.criterion, args.damping, args.seed
    )
    model_io.save_model(model, args.model)
    log_lines = [f"{m + 1} {loss!r}" for m, loss in enumerate(model.loss_history)]
    if args.report:
        Path(args.report).write_text("iteration loss\n" + "".join(l + "\n" for l in log_lines))
    else:
        for line in log_lines:
            print(f"loss {line}")
    acc, loss = booster.evaluate(model, data)
    print(f"train accuracy {acc:.6f} loss {loss:.6f}")
    if args.test:
        acc, loss = booster.evaluate(model, read_libsvm(args.test))
        print(f"test accuracy {acc:.6f} loss {loss:.6f}")
    print(f"model {args.model} fingerprint {model_io.fingerprint(model)}")
    return EXIT_OK


def cmd_sign(args) -> int:
    model = model_io.load_model(args.model)
    fp = model_io.fingerprint(model)
    cands = signing.locate_candidates(model, args.S, args.alpha, args.max_steps, args.seed)
    keys = signing.select_keys(cands, args.S, args.epsilon, fp)
    if args.message is not None:
        message = signing.SignatureMessage.from_str(args.message)
        if len(message) > len(keys):
            raise ValueError(f"message has {len(message)} bits but only {len(keys)} keys were selected")
        keys = keys[: len(message)]
    else:
        message = signing.SignatureMessage.random(len(keys), args.seed)
    signed = signing.embed(model, keys, message, args.epsilon)
    deltas = signing.applied_perturbations(model, keys, message, args.epsilon)
    model_io.save_model(signed, args.signed_model)
    model_io.save_keys(keys, message, args.keys, deltas)
    print(f"candidates {len(cands)} selected {len(keys)}")
    print(f"message {message}")
    print(f"signed {args.signed_model} fingerprint {model_io.fingerprint(signed)}")
    return EXIT_OK


def subprocess_predictor(command: str):
    """Predictor backed by an external process; sees only instances and answers classes."""
    argv = shlex.split(command)

    def predict_many(X: np.ndarray) -> list[int]:
        out = subprocess.run(argv, input=format_instances(X), capture_output=True, text=True, check=True)
        return [int(tok) for tok in out.stdout.split()]

    return predict_many


def cmd_verify(args) -> int:
    expect = None
    if args.model:
        expect = model_io.fingerprint(model_io.load_model(args.model))
    kf = model_io.load_keys(args.keys, expect_fingerprint=expect)
    keys, expected = kf.keys, kf.message
    if args.predictor_cmd:
        answers = subprocess_predictor(args.predictor_cmd)(np.array([k.instance for k in keys]))
        if len(answers) != len(keys):
            raise RuntimeError(f"predictor answered {len(answers)} of {len(keys)} queries")
        lookup = iter(answers)
        extraction = signing.extract(lambda x: next(lookup), keys)
    else:
        extraction = signing.extract(signing.model_predictor(model_io.load_model(args.signed_model)), keys)
    verdict = signing.verify(extraction, expected)
    got = str(extraction.message)
    diff = "".join("^" if a != b else " " for a, b in zip(str(expected), got)).rstrip()
    print(f"expected  {expected}")
    print(f"extracted {got}")
    if diff:
        print(f"diff      {diff}")
    print(f"verdict {verdict.value}" + (" (third-class response)" if extraction.tampered else ""))
    return EXIT_OK if verdict is signing.Verdict.AUTHENTIC else EXIT_TAMPERED


def cmd_attack(args) -> int:
    signed = model_io.load_model(args.signed_model)
    kf = model_io.load_keys(args.keys)
    train_data = read_libsvm(args.data) if args.data else None
    attacked = attacks.run_attack(args.attack, signed, args.n, train_data, args.seed)
    test = read_libsvm(args.test) if args.test else None
    report = attacks.measure_fragility(kf.keys, kf.message, attacked, test, signed, args.attack, args.n)
    if args.out:
        model_io.save_model(attacked, args.out)
    if args.report:
        Path(args.report).write_text(report.to_csv())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_eval(args) -> int:
    model = model_io.load_model(args.model)
    test = read_libsvm(args.test)
    acc, loss = booster.evaluate(model, test)
    print(f"accuracy {acc:.6f} loss {loss:.6f} n {len(test)}")
    if args.signed_model:
        signed = model_io.load_model(args.signed_model)
        X = test.to_dense(model.num_features)
        changed = int((booster.predict_class(model, X) != booster.predict_class(signed, X)).sum())
        sacc, sloss = booster.evaluate(signed, test)
        print(f"signed accuracy {sacc:.6f} loss {sloss:.6f}")
        print(f"changed {changed}/{len(test)}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = model_io.load_model(args.model)
    leaves = [t.n_leaves for _, _, t in model.iter_trees()]
    values = np.concatenate([t.value[t.feature < 0] for _, _, t in model.iter_trees()]) if leaves else np.zeros(0)
    print(f"classes {model.num_classes} iterations {model.num_iterations} trees {len(leaves)}")
    print(f"criterion {model.criterion} learning_rate {model.learning_rate} J {model.num_leaves} damping {model.damping}")
    print(f"features {model.num_features} bins {int(model.bins.n_bins.sum())}")
    if leaves:
        print(f"leaves total {sum(leaves)} min {min(leaves)} max {max(leaves)} mean {np.mean(leaves):.2f}")
        print(f"leaf values min {values.min():.6g} max {values.max():.6g} mean_abs {np.abs(values).mean():.6g}")
    print(f"fingerprint {model_io.fingerprint(model)}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = model_io.load_model(args.model)
    text = Path(args.data).read_text() if args.data else sys.stdin.read()
    data = parse_libsvm(text, label_base=0)
    if len(data):
        for c in booster.predict_class(model, data.to_dense(model.num_features)):
            print(int(c))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sign": cmd_sign,
    "verify": cmd_verify,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, subprocess.CalledProcessError) as exc:
        print(f"treesign {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
