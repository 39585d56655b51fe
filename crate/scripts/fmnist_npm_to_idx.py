#!/usr/bin/env python3
"""Convert the per-class JSON dumps shipped by the `fashion-mnist` npm package
into standard IDX files (train-*/t10k-*).

The package carries no official split, so each class contributes its first
6,000 images to the train files and the next 1,000 to the test files. Samples
are interleaved class by class so that any prefix is class-balanced. Entries
that are not 28x28 images are skipped.

usage: fmnist_npm_to_idx.py <package_dir> <out_dir>
"""
import json
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 6000
TEST_PER_CLASS = 1000


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def interleave(per_class):
    out = []
    for row in zip(*per_class):
        out.extend(row)
    return out


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for c in range(10):
        data = json.loads((pkg / "src" / "clothes" / f"{c}.json").read_text())["data"]
        # the class-0 dump contains a couple of empty entries
        data = [img for img in data if len(img) == 28 * 28]
        train.append([(img, c) for img in data[:TRAIN_PER_CLASS]])
        test.append([(img, c) for img in data[TRAIN_PER_CLASS:TRAIN_PER_CLASS + TEST_PER_CLASS]])
    for prefix, split in (("train", interleave(train)), ("t10k", interleave(test))):
        write_images(out / f"{prefix}-images-idx3-ubyte", [img for img, _ in split])
        write_labels(out / f"{prefix}-labels-idx1-ubyte", [c for _, c in split])
        print(f"{prefix}: {len(split)} samples")


if __name__ == "__main__":
    main()
