"""Build data/pendigits.{train,test} in LIBSVM format.

The UCI pen-based digits corpus (10,992 instances, 16 features, 10 classes) is
shipped inside the ``keel-ds`` wheel as ``penbased.dat``. KEEL stores the rows
shuffled, so the original writer-disjoint split is not recoverable; we draw a
seeded 7,494 / 3,498 split that matches the standard train/test sizes.

    python scripts/prepare_pendigits.py [--wheel PATH] [--seed 0]
"""
import argparse
import glob
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

N_TRAIN = 7494
MEMBER = "keel_ds/data/balanced/raw/penbased.dat"


def fetch_wheel(dest):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
         "keel-ds==0.2.5", "-d", dest],
        check=True,
    )
    return glob.glob(str(Path(dest) / "keel_ds-*.whl"))[0]


def to_libsvm(rows):
    out = []
    for row in rows:
        label = int(row[-1]) + 1
        feats = " ".join(f"{j + 1}:{int(v)}" for j, v in enumerate(row[:-1]) if v != 0)
        out.append(f"{label} {feats}".rstrip())
    return "\n".join(out) + "\n"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data"))
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(tmp)
        text = zipfile.ZipFile(wheel).read(MEMBER).decode()
    rows = np.array([[float(t) for t in line.split(",")] for line in text.splitlines() if line.strip()])
    assert rows.shape == (10992, 17), rows.shape

    perm = np.random.default_rng(args.seed).permutation(len(rows))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pendigits.train").write_text(to_libsvm(rows[perm[:N_TRAIN]]))
    (out / "pendigits.test").write_text(to_libsvm(rows[perm[N_TRAIN:]]))
    print(f"wrote {N_TRAIN} train / {len(rows) - N_TRAIN} test rows to {out}")


if __name__ == "__main__":
    main()
