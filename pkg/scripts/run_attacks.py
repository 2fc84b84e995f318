"""Fraction of key classes changed by append / remove attacks.

    python scripts/run_attacks.py [--attack append remove] [--amount 1 5 10]

For each signed size M the first ``--keys`` of the alpha=8 search are signed
with an all-ones message, then attacked; results are averaged over seeds.
"""
import argparse

import numpy as np

from common import RESULTS, cached_model, load_pendigits, print_table, search, truncate, write_csv
from treesign.attacks import measure_fragility, run_attack
from treesign.signing import SignatureMessage, embed


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("-J", type=int, default=20)
    ap.add_argument("--M", type=int, nargs="+", default=[50, 100, 200])
    ap.add_argument("--attack", nargs="+", default=["append", "remove"], choices=["append", "remove", "noise"])
    ap.add_argument("--amount", type=float, nargs="+", default=[1, 5, 10])
    ap.add_argument("--keys", type=int, default=20)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default=str(RESULTS / "attacks.csv"))
    args = ap.parse_args()

    train_raw, _, binned = load_pendigits()
    full = cached_model(binned, args.J, max(args.M))
    rows = []
    for M in args.M:
        model = truncate(full, M)
        signed = []
        for seed in range(args.seeds):
            keys = search(model, seed=seed)[1][: args.keys]
            msg = SignatureMessage.ones(len(keys))
            signed.append((keys, msg, embed(model, keys, msg)))
        for kind in args.attack:
            for amount in args.amount:
                n = amount if kind == "noise" else int(amount)
                fracs = [
                    measure_fragility(keys, msg, run_attack(kind, s, n, train_raw, seed=i)).changed_fraction
                    for i, (keys, msg, s) in enumerate(signed)
                ]
                rows.append({
                    "M": M, "attack": kind, "amount": n, "keys": len(signed[0][0]),
                    "changed_mean": f"{np.mean(fracs):.2f}", "changed_min": f"{min(fracs):.2f}",
                })
    print_table(rows)
    write_csv(args.out, rows)


if __name__ == "__main__":
    main()
