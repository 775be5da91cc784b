"""Write a seeded MNIST subset as an IDX image file.

    python3 scripts/make_mnist_subset.py OUT N [--seed S] [--source IDX]

Without --source, the 5,000-image sample bundled with mlxtend is used.
"""

import argparse
import sys
from importlib import resources

import numpy as np

from starnet.data_io import read_idx, write_idx


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out")
    p.add_argument("n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source")
    a = p.parse_args(argv)
    if a.source:
        pixels = read_idx(a.source)
    else:
        csv = resources.files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"
        pixels = np.loadtxt(str(csv), delimiter=",", dtype=np.uint8)[:, :-1].reshape(-1, 28, 28)
    if a.n > len(pixels):
        p.error(f"source has only {len(pixels)} images")
    idx = np.random.default_rng(a.seed).permutation(len(pixels))[:a.n]
    write_idx(a.out, pixels[idx])
    return 0


if __name__ == "__main__":
    sys.exit(main())
