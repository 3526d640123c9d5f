#!/usr/bin/env python3
"""Build the desk-scale MNIST IDX files under data/desk/.

Source: the 10 000 MNIST digits bundled with the `mnist` npm package
(`npm pack mnist`, MIT licensed), stored there as JSON arrays of pixel
intensities rounded to three decimals. Each value is mapped back to its
byte with round(v * 255).

The first 600 samples of every class (in package order) form the
6000-sample class-balanced training split; the remaining 4000 samples form
the test split.

Usage: scripts/make_desk_mnist.py <path/to/package> [out_dir]
"""

import gzip
import json
import struct
import sys
from pathlib import Path

PER_CLASS = 600


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    pkg = Path(sys.argv[1])
    out = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("data/desk")
    out.mkdir(parents=True, exist_ok=True)
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        data = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(len(data) // 784):
            img = [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
            if i < PER_CLASS:
                train_x.append(img)
                train_y.append(digit)
            else:
                test_x.append(img)
                test_y.append(digit)
    write_idx_images(out / "train-images-idx3-ubyte.gz", train_x)
    write_idx_labels(out / "train-labels-idx1-ubyte.gz", train_y)
    write_idx_images(out / "t10k-images-idx3-ubyte.gz", test_x)
    write_idx_labels(out / "t10k-labels-idx1-ubyte.gz", test_y)
    print(f"train={len(train_y)} test={len(test_y)} -> {out}")


if __name__ == "__main__":
    main()
