#!/usr/bin/env python3
"""Build the desk-scale MNIST subset (2000 train / 1000 test) as IDX files.

Source: the `mnist` npm package (10,000 MNIST digits stored as normalized
JSON pixel arrays). Fetch it with `npm pack mnist` and pass the extracted
`package/src/digits` directory.

    python3 scripts/make_mnist_desk.py /tmp/package/src/digits data/mnist-desk
"""
import json
import os
import random
import struct
import sys

TRAIN, TEST, SIDE = 2000, 1000, 28


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, out = sys.argv[1], sys.argv[2]
    samples = []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            raw = json.load(f)["data"]
        n = len(raw) // (SIDE * SIDE)
        for k in range(n):
            px = raw[k * SIDE * SIDE:(k + 1) * SIDE * SIDE]
            samples.append(([min(255, max(0, round(v * 255))) for v in px], digit))
    random.Random(20190707).shuffle(samples)
    os.makedirs(out, exist_ok=True)
    train, test = samples[:TRAIN], samples[TRAIN:TRAIN + TEST]
    write_images(os.path.join(out, "train-images-idx3-ubyte"), [s[0] for s in train])
    write_labels(os.path.join(out, "train-labels-idx1-ubyte"), [s[1] for s in train])
    write_images(os.path.join(out, "t10k-images-idx3-ubyte"), [s[0] for s in test])
    write_labels(os.path.join(out, "t10k-labels-idx1-ubyte"), [s[1] for s in test])
    print(f"{len(samples)} digits available; wrote {len(train)} train / {len(test)} test")


if __name__ == "__main__":
    main()
