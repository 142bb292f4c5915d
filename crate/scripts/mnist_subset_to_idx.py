#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into gzipped IDX files.

The package stores ~10k MNIST training digits as JSON arrays of pixel/255
rounded to three decimals; round(v * 255) recovers the original byte exactly.

usage: mnist_subset_to_idx.py <npm-package-dir> <out-dir>
"""
import gzip
import json
import os
import struct
import sys


def main(pkg, out):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as fh:
            flat = json.load(fh)["data"]
        assert len(flat) % 784 == 0
        for k in range(len(flat) // 784):
            px = flat[k * 784:(k + 1) * 784]
            images.append(bytes(int(round(v * 255)) for v in px))
            labels.append(digit)
    os.makedirs(out, exist_ok=True)
    n = len(images)
    with gzip.GzipFile(os.path.join(out, "train-images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for img in images:
            fh.write(img)
    with gzip.GzipFile(os.path.join(out, "train-labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(bytes(labels))
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
