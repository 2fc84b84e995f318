"""Test-set predictions changed by signing with an all-ones message.

    python scripts/run_functionality.py [--M 50 100 200] [-J 20]
"""
import argparse

import numpy as np

from common import RESULTS, cached_model, load_pendigits, print_table, search, truncate, write_csv
from treesign.booster import predict_class
from treesign.signing import SignatureMessage, embed


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("-J", type=int, default=20)
    ap.add_argument("--M", type=int, nargs="+", default=[50, 100, 200])
    ap.add_argument("-S", type=int, default=40)
    ap.add_argument("--alpha", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(RESULTS / "functionality.csv"))
    args = ap.parse_args()

    _, test, binned = load_pendigits()
    X, y = test.to_dense(binned.X.shape[1]), test.labels
    full = cached_model(binned, args.J, max(args.M))
    rows = []
    for M in args.M:
        model = truncate(full, M)
        _, keys, _ = search(model, args.S, args.alpha, seed=args.seed)
        signed = embed(model, keys, SignatureMessage.ones(len(keys)))
        before, after = predict_class(model, X), predict_class(signed, X)
        rows.append({
            "M": M,
            "keys": len(keys),
            "changed": f"{int((before != after).sum())}/{len(X)}",
            "acc_before": f"{np.mean(before == y):.4f}",
            "acc_after": f"{np.mean(after == y):.4f}",
        })
    print_table(rows)
    write_csv(args.out, rows)


if __name__ == "__main__":
    main()
