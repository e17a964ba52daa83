#!/usr/bin/env python3
"""Build the small MNIST IDX subset shipped in data/mnist-subset/.

Source: the MIT-licensed `mnist` npm package (digits/0.json .. 9.json hold
flattened 28x28 digits scaled to [0,1]). Fetch it with `npm pack mnist` and
pass the extracted `package/` directory as the first argument.
"""
import json
import struct
import sys
from pathlib import Path

import numpy as np

TRAIN_PER_DIGIT = 200
TEST_PER_DIGIT = 50


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(np.asarray(images, dtype=np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def main():
    pkg = Path(sys.argv[1])
    out = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("data/mnist-subset")
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        flat = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        pixels = np.rint(np.asarray(flat).reshape(-1, 784) * 255.0).clip(0, 255)
        assert len(pixels) >= TRAIN_PER_DIGIT + TEST_PER_DIGIT
        train += [(p, digit) for p in pixels[:TRAIN_PER_DIGIT]]
        test += [(p, digit) for p in pixels[TRAIN_PER_DIGIT:TRAIN_PER_DIGIT + TEST_PER_DIGIT]]
    rng = np.random.default_rng(20240601)
    for name, rows in (("train", train), ("t10k", test)):
        order = rng.permutation(len(rows))
        images = [rows[i][0] for i in order]
        labels = [rows[i][1] for i in order]
        write_images(out / f"{name}-images-idx3-ubyte", images)
        write_labels(out / f"{name}-labels-idx1-ubyte", labels)
        print(name, len(labels), "first label", labels[0])


if __name__ == "__main__":
    main()
