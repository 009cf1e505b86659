#!/usr/bin/env python3
"""Build the balanced MNIST subset shipped in data/mnist/.

Reads the per-class digit dumps from the `mnist` npm package (28x28 images,
pixel values normalized to [0,1]) and writes four IDX files:

    train-images.idx3-ubyte   2000 images
    train-labels.idx1-ubyte   2000 labels
    test-images.idx3-ubyte    1000 images
    test-labels.idx1-ubyte    1000 labels

The subset takes the first 300 images of each class, interleaves them
round-robin, applies one fixed shuffle, and splits 2000/1000. Pixels are
de-normalized back to u8 (round(v * 255)).

Usage: make_mnist_subset.py <npm-package-dir> <output-dir>
"""

import json
import random
import struct
import sys
from pathlib import Path

PER_CLASS = 300
TRAIN_N = 2000
TEST_N = 1000
SHUFFLE_SEED = 20260823


def write_idx_images(path: Path, images: list[bytes]) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(img)


def write_idx_labels(path: Path, labels: list[int]) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main() -> None:
    pkg_dir = Path(sys.argv[1])
    out_dir = Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)

    per_class: list[list[bytes]] = []
    for digit in range(10):
        flat = json.loads((pkg_dir / "src" / "digits" / f"{digit}.json").read_text())["data"]
        imgs = []
        for i in range(PER_CLASS):
            px = flat[i * 784 : (i + 1) * 784]
            imgs.append(bytes(round(v * 255) for v in px))
        per_class.append(imgs)

    samples: list[tuple[bytes, int]] = []
    for i in range(PER_CLASS):
        for digit in range(10):
            samples.append((per_class[digit][i], digit))

    random.Random(SHUFFLE_SEED).shuffle(samples)
    assert len(samples) == TRAIN_N + TEST_N

    train, test = samples[:TRAIN_N], samples[TRAIN_N:]
    write_idx_images(out_dir / "train-images.idx3-ubyte", [s[0] for s in train])
    write_idx_labels(out_dir / "train-labels.idx1-ubyte", [s[1] for s in train])
    write_idx_images(out_dir / "test-images.idx3-ubyte", [s[0] for s in test])
    write_idx_labels(out_dir / "test-labels.idx1-ubyte", [s[1] for s in test])
    for split, rows in (("train", train), ("test", test)):
        hist = [0] * 10
        for _, lbl in rows:
            hist[lbl] += 1
        print(split, "class histogram:", hist)


if __name__ == "__main__":
    main()
