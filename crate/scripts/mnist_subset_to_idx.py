#!/usr/bin/env python3
"""Convert the 5000-digit MNIST subset bundled with mlxtend into gzipped IDX files.

Usage: mnist_subset_to_idx.py <mlxtend wheel or mnist_5k.csv.gz> <out dir>
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path


def load_rows(src: Path):
    if src.suffix == ".whl":
        raw = zipfile.ZipFile(src).read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        raw = src.read_bytes()
    text = gzip.decompress(raw).decode()
    return [[int(float(v)) for v in line.split(",")] for line in text.splitlines() if line]


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    rows = load_rows(src)
    n = len(rows)
    images = bytearray(struct.pack(">IIII", 0x00000803, n, 28, 28))
    labels = bytearray(struct.pack(">II", 0x00000801, n))
    for row in rows:
        images.extend(bytes(row[:784]))
        labels.append(row[784])
    # mtime=0 keeps the archives byte-reproducible
    for name, payload in (("images-idx3-ubyte.gz", images), ("labels-idx1-ubyte.gz", labels)):
        with open(out / name, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0, filename="") as gz:
            gz.write(payload)
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main()
