"""Key counts over forest shapes, and search cost against alpha.

    python scripts/run_key_search.py                      # J x M grid, alpha=8
    python scripts/run_key_search.py --alpha-sweep 1 2 4 8  # J=20 M=50 timing

The grid trains one pendigits model per J at max(M) and truncates it.
"""
import argparse

from common import RESULTS, cached_model, load_pendigits, print_table, search, truncate, write_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--J", type=int, nargs="+", default=[4, 8, 12, 16, 20])
    ap.add_argument("--M", type=int, nargs="+", default=[50, 100, 200])
    ap.add_argument("-S", type=int, default=40)
    ap.add_argument("--alpha", type=int, default=8)
    ap.add_argument("--max-steps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--alpha-sweep", type=int, nargs="*", help="alphas to time on J=20 M=50 instead of the grid")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    _, _, binned = load_pendigits()
    rows = []
    if args.alpha_sweep:
        model = truncate(cached_model(binned, 20, 200), 50)
        for alpha in args.alpha_sweep:
            cands, keys, secs = search(model, args.S, alpha, args.max_steps, args.seed)
            rows.append({"alpha": alpha, "candidates": len(cands), "keys": len(keys), "seconds": f"{secs:.2f}"})
        out = args.out or RESULTS / "alpha_sweep.csv"
    else:
        for J in args.J:
            full = cached_model(binned, J, max(args.M))
            for M in args.M:
                cands, keys, secs = search(truncate(full, M), args.S, args.alpha, args.max_steps, args.seed)
                rows.append({"J": J, "M": M, "candidates": len(cands), "keys": len(keys), "seconds": f"{secs:.2f}"})
        out = args.out or RESULTS / "key_counts.csv"
    print_table(rows)
    write_csv(out, rows)


if __name__ == "__main__":
    main()
