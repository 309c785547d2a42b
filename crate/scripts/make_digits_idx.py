#!/usr/bin/env python3
"""Convert scikit-learn's bundled handwritten-digit set (8x8, 10 classes) to IDX files.

Writes train/test image (magic 0x00000803) and label (magic 0x00000801) files.
The split is stratified per class with a fixed seed, 80% train / 20% test.
Pixel intensities 0..16 are rescaled to 0..255.
"""
import argparse
import csv
import gzip
import os
import random
import struct


def find_digits_csv():
    import sklearn

    return os.path.join(os.path.dirname(sklearn.__file__), "datasets", "data", "digits.csv.gz")


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 8, 8))
        for img in images:
            f.write(bytes(min(255, v * 16) for v in img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--src", default=None)
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "digits"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    src = args.src or find_digits_csv()
    by_class = {c: [] for c in range(10)}
    with gzip.open(src, "rt") as f:
        for row in csv.reader(f):
            vals = [int(float(v)) for v in row]
            by_class[vals[64]].append(vals[:64])

    rng = random.Random(args.seed)
    train, test = [], []
    for c in range(10):
        rows = by_class[c]
        rng.shuffle(rows)
        n_test = round(len(rows) * 0.2)
        test += [(r, c) for r in rows[:n_test]]
        train += [(r, c) for r in rows[n_test:]]
    rng.shuffle(train)
    rng.shuffle(test)

    os.makedirs(args.out, exist_ok=True)
    for name, split in (("train", train), ("test", test)):
        write_images(os.path.join(args.out, f"{name}-images-idx3-ubyte"), [r for r, _ in split])
        write_labels(os.path.join(args.out, f"{name}-labels-idx1-ubyte"), [c for _, c in split])
        print(f"{name}: {len(split)} samples")


if __name__ == "__main__":
    main()
