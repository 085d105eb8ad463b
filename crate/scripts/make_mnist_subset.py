"""Build the bundled MNIST subset fixture as gzip IDX files.

The 5000-image MNIST sample (500 per digit) shipped inside the `mlxtend`
wheel is rewritten in the standard IDX layout so the Rust loaders can read
it like the original distribution files.

    pip download --no-deps mlxtend -d /tmp/pkgs
    python3 scripts/make_mnist_subset.py /tmp/pkgs/mlxtend-*.whl data/mnist-5k
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def main(wheel, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(raw.decode().splitlines(), delimiter=",")
    images = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    n = len(labels)
    img = struct.pack(">IIII", 0x803, n, 28, 28) + images.tobytes()
    lab = struct.pack(">II", 0x801, n) + labels.tobytes()
    # mtime=0 keeps the archives byte-reproducible
    with open(out / "images-idx3-ubyte.gz", "wb") as f:
        f.write(gzip.compress(img, mtime=0))
    with open(out / "labels-idx1-ubyte.gz", "wb") as f:
        f.write(gzip.compress(lab, mtime=0))
    print(n, np.bincount(labels))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
