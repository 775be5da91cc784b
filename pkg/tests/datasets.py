"""MNIST subsets for the tests that need real images.

Set ``STARNET_MNIST_IDX`` to an MNIST image file (IDX, optionally gzipped)
to use it; otherwise the 5,000-image sample bundled with mlxtend is used.
Either way the subset is written to an IDX file and read back through
``load_idx`` so the loader is on the path the trainer sees.
"""

import functools
import os
import tempfile
from importlib import resources

import numpy as np
import pytest

from starnet.data_io import load_idx, read_idx, write_idx

ENV_VAR = "STARNET_MNIST_IDX"


def _source_pixels():
    path = os.environ.get(ENV_VAR)
    if path:
        return read_idx(path)
    try:
        csv = resources.files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"
    except ModuleNotFoundError:
        pytest.skip(f"no MNIST source: install mlxtend or set {ENV_VAR}")
    # rows are sorted by label; the last column is the label
    table = np.loadtxt(str(csv), delimiter=",", dtype=np.uint8)
    return table[:, :-1].reshape(-1, 28, 28)


@functools.lru_cache(maxsize=None)
def _pixels():
    return _source_pixels()


@functools.lru_cache(maxsize=None)
def mnist_subset(n, seed=0):
    """``n`` images drawn by a seeded permutation, as an (n, 784) matrix in [0, 1]."""
    pixels = _pixels()
    if n > len(pixels):
        pytest.skip(f"MNIST source has only {len(pixels)} images")
    idx = np.random.default_rng(seed).permutation(len(pixels))[:n]
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "subset-idx3-ubyte")
        write_idx(path, pixels[idx])
        batch = load_idx(path)
    out = batch.pixels.reshape(n, -1)
    out.setflags(write=False)
    return out


def mnist_subset_file(path, n, seed=0):
    """Write the same subset as ``mnist_subset`` to an IDX file."""
    pixels = _pixels()
    idx = np.random.default_rng(seed).permutation(len(pixels))[:n]
    write_idx(path, pixels[idx])
    return path
