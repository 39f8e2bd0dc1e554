"""Writes the 8x8 handwritten digits as MNIST-format IDX files.

The first 1400 rows are the training split, the remaining 397 the test split.
Pixel values 0..16 are rescaled to bytes with round(v * 255 / 16).
"""

import struct
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

TRAIN_ROWS = 1400


def write_idx(prefix: Path, images: np.ndarray, labels: np.ndarray) -> None:
    n, rows, cols = images.shape
    with open(f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">iiii", 2051, n, rows, cols))
        f.write(images.tobytes())
    with open(f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">ii", 2049, n))
        f.write(labels.tobytes())


def main() -> None:
    d = load_digits()
    images = np.rint(d.data * 255 / 16).astype(np.uint8).reshape(-1, 8, 8)
    labels = d.target.astype(np.uint8)
    out = Path(__file__).resolve().parent / "digits"
    out.mkdir(exist_ok=True)
    write_idx(out / "train", images[:TRAIN_ROWS], labels[:TRAIN_ROWS])
    write_idx(out / "test", images[TRAIN_ROWS:], labels[TRAIN_ROWS:])


if __name__ == "__main__":
    main()
