"""Build the MNIST IDX fixtures in tests/data from the 5000-sample MNIST subset
bundled inside the mlxtend wheel (mlxtend/data/data/mnist_5k.csv.gz).

usage: python3 tools/make_mnist_fixture.py path/to/mlxtend-*.whl
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from sapool.data import write_idx

N_TRAIN = 4000
OUT = Path(__file__).resolve().parent.parent / "tests" / "data"


def main(wheel: str) -> None:
    with zipfile.ZipFile(wheel) as zf:
        raw = zf.read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",", dtype=np.int64)
    images = table[:, :784].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, 784].astype(np.uint8)
    # the csv is sorted by class: split each class 80/20, then shuffle
    rng = np.random.default_rng(0)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cut = len(idx) * N_TRAIN // len(labels)
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    splits = {"train": rng.permutation(np.concatenate(train_idx)), "test": rng.permutation(np.concatenate(test_idx))}
    for split, sl in splits.items():
        write_idx(OUT / f"mnist-{split}-images-idx3-ubyte.gz", images[sl])
        write_idx(OUT / f"mnist-{split}-labels-idx1-ubyte.gz", labels[sl])
        print(split, images[sl].shape, np.bincount(labels[sl], minlength=10))


if __name__ == "__main__":
    main(sys.argv[1])
