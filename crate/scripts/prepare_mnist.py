#!/usr/bin/env python3
"""Build MNIST IDX files from the digits bundled in the npm `mnist` package.

The npm package (https://github.com/cazala/mnist) ships 10,000 MNIST digits as
JSON arrays of 28x28 intensities in [0, 1]. This script splits every digit
class deterministically into train/test parts and writes the four standard
IDX files:

    train-images-idx3-ubyte  train-labels-idx1-ubyte
    t10k-images-idx3-ubyte   t10k-labels-idx1-ubyte

Usage:
    python3 scripts/prepare_mnist.py [--tarball mnist-1.1.0.tgz] [--out data/mnist]

Without --tarball the package is fetched with `npm pack mnist@1.1.0`.
If the official IDX files are available they can be dropped into the output
directory directly instead; the loader accepts either.
"""

import argparse
import json
import os
import random
import struct
import subprocess
import tarfile
import tempfile

SIDE = 28
PIXELS = SIDE * SIDE


def write_images(path, images):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 2051, len(images), SIDE, SIDE))
        for img in images:
            fh.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 2049, len(labels)))
        fh.write(bytes(labels))


def load_digits(tarball):
    digits = {}
    with tarfile.open(tarball, "r:gz") as tar:
        for d in range(10):
            member = tar.getmember(f"package/src/digits/{d}.json")
            raw = json.load(tar.extractfile(member))["data"]
            n = len(raw) // PIXELS
            digits[d] = [
                [min(255, max(0, round(v * 255))) for v in raw[i * PIXELS:(i + 1) * PIXELS]]
                for i in range(n)
            ]
    return digits


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tarball")
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--test-fraction", type=float, default=1 / 7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    tarball = args.tarball
    tmp = None
    if tarball is None:
        tmp = tempfile.mkdtemp()
        subprocess.run(["npm", "pack", "mnist@1.1.0", "--pack-destination", tmp], check=True)
        tarball = os.path.join(tmp, "mnist-1.1.0.tgz")

    digits = load_digits(tarball)
    rng = random.Random(args.seed)
    train, test = [], []
    for d in range(10):
        samples = digits[d]
        order = list(range(len(samples)))
        rng.shuffle(order)
        n_test = int(len(samples) * args.test_fraction)
        test += [(samples[i], d) for i in order[:n_test]]
        train += [(samples[i], d) for i in order[n_test:]]
    rng.shuffle(train)
    rng.shuffle(test)

    os.makedirs(args.out, exist_ok=True)
    write_images(os.path.join(args.out, "train-images-idx3-ubyte"), [x for x, _ in train])
    write_labels(os.path.join(args.out, "train-labels-idx1-ubyte"), [y for _, y in train])
    write_images(os.path.join(args.out, "t10k-images-idx3-ubyte"), [x for x, _ in test])
    write_labels(os.path.join(args.out, "t10k-labels-idx1-ubyte"), [y for _, y in test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {args.out}")


if __name__ == "__main__":
    main()
