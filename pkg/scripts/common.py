"""Shared helpers for the pendigits experiment scripts.

Models are trained once at the largest iteration count and cached under
``results/models``; shorter models are truncations, which boosting makes
byte-identical to a fresh run of that length.
"""
import csv
import time
from pathlib import Path

from treesign.attacks import attack_remove
from treesign.booster import train
from treesign.data import apply_bins, build_bins, read_libsvm
from treesign.model_io import fingerprint, load_model, save_model
from treesign.signing import locate_candidates, select_keys

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"
RESULTS = ROOT / "results"


def load_pendigits(data_dir=DATA):
    tr = read_libsvm(Path(data_dir) / "pendigits.train")
    te = read_libsvm(Path(data_dir) / "pendigits.test")
    return tr, te, apply_bins(tr, build_bins(tr))


def cached_model(binned, J, M, cache=RESULTS / "models", K=10):
    path = Path(cache) / f"pendigits_J{J}_M{M}.tsm"
    if path.exists():
        return load_model(path)
    t = time.perf_counter()
    model = train(binned, K, M, J)
    print(f"trained J={J} M={M} in {time.perf_counter() - t:.1f} s")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, path)
    return model


def truncate(model, M):
    return model if M == model.num_iterations else attack_remove(model, model.num_iterations - M)


def search(model, S=40, alpha=8, max_steps=1000, seed=0):
    """Returns (candidates, keys, seconds)."""
    t = time.perf_counter()
    cands = locate_candidates(model, S, alpha, max_steps, seed)
    keys = select_keys(cands, S, fingerprint=fingerprint(model))
    return cands, keys, time.perf_counter() - t


def write_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {path}")


def print_table(rows):
    cols = list(rows[0])
    width = [max(len(c), *(len(str(r[c])) for r in rows)) for c in cols]
    print("  ".join(c.rjust(w) for c, w in zip(cols, width)))
    for r in rows:
        print("  ".join(str(r[c]).rjust(w) for c, w in zip(cols, width)))
