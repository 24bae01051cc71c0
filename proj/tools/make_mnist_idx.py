#!/usr/bin/env python3
"""Converts mlxtend's bundled 5000-digit MNIST subset to IDX files.

    pip download --no-deps mlxtend==0.24.0 -d /tmp/pd
    python3 -c "import zipfile; zipfile.ZipFile('/tmp/pd/mlxtend-0.24.0-py3-none-any.whl').extractall('/tmp/pd')"
    python3 tools/make_mnist_idx.py /tmp/pd/mlxtend/data/data/mnist_5k.csv.gz data/mnist
"""

import argparse
import pathlib
import struct

import numpy as np


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("csv", help="mnist_5k.csv.gz (784 pixels, then the label)")
    ap.add_argument("out", help="output directory")
    args = ap.parse_args()

    data = np.loadtxt(args.csv, delimiter=",").astype(np.uint8)
    images, labels = data[:, :-1], data[:, -1]
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    (out / "mnist5k-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x00000803, n, 28, 28) + images.tobytes())
    (out / "mnist5k-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x00000801, n) + labels.tobytes())
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    main()
