"""Convert the 5000-image MNIST sample shipped inside the ``mlxtend`` wheel to IDX.

Usage::

    pip download --no-deps -d /tmp/wheels mlxtend
    python scripts/make_mnist_subset.py /tmp/wheels/mlxtend-*.whl data/mnist5k

Writes ``images-idx3-ubyte.gz`` and ``labels-idx1-ubyte.gz``. The full MNIST
IDX files can be used instead anywhere a dataset directory is accepted.
"""
import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from gatedmeta.tasks import write_idx


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28)
    if not np.array_equal(images, np.rint(images)) or images.max() > 255:
        raise SystemExit("unexpected pixel values")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(
        out / "images-idx3-ubyte.gz",
        out / "labels-idx1-ubyte.gz",
        images.astype(np.uint8),
        table[:, -1].astype(np.uint8),
    )
    print(f"wrote {images.shape[0]} images to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
