#!/usr/bin/env python3
"""Convert the 5000-digit MNIST subset bundled in the mlxtend wheel to IDX files.

Usage: make_mnist5k.py <mlxtend wheel or mnist_5k.csv.gz> <output dir>

Each class contributes 400 training and 100 test images, taken in file order.
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(src: Path):
    if src.suffix == ".whl":
        raw = zipfile.ZipFile(src).read(MEMBER)
    else:
        raw = src.read_bytes()
    for line in gzip.decompress(raw).decode().splitlines():
        values = [int(float(v)) for v in line.split(",")]
        yield values[:-1], values[-1]


def write_idx(out: Path, stem: str, rows):
    images = bytearray(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
    labels = bytearray(struct.pack(">II", 0x00000801, len(rows)))
    for pixels, label in rows:
        images += bytes(pixels)
        labels.append(label)
    (out / f"{stem}-images-idx3-ubyte").write_bytes(images)
    (out / f"{stem}-labels-idx1-ubyte").write_bytes(labels)


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    seen = {}
    train, test = [], []
    for pixels, label in read_rows(src):
        n = seen.get(label, 0)
        seen[label] = n + 1
        (train if n < 400 else test).append((pixels, label))
    write_idx(out, "train", train)
    write_idx(out, "t10k", test)
    print(f"train={len(train)} test={len(test)}")


if __name__ == "__main__":
    main()
