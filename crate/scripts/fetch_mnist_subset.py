#!/usr/bin/env python3
"""Builds data/mnist-subset from the 10,000 MNIST digits bundled in the
`mnist` npm package (MIT licensed).

The package stores each digit as 784 floats with three decimals; multiplying
by 255 and rounding recovers the original bytes. The digits are shuffled with
a fixed seed and split 8000/2000 into gzipped IDX files.

Usage: scripts/fetch_mnist_subset.py [--package PATH_TO_TGZ] [--out DIR]
"""

import argparse
import gzip
import json
import random
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

SEED = 20190101
TRAIN = 8000


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    # mtime=0 keeps the archives byte-stable across runs.
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(header + bytes(payload))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--package", type=Path)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data" / "mnist-subset")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tgz = args.package
        if tgz is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True)
            tgz = Path(tmp) / "mnist-1.1.0.tgz"
        with tarfile.open(tgz) as tar:
            tar.extractall(tmp)
        examples = []
        for digit in range(10):
            blob = json.loads((Path(tmp) / "package/src/digits" / f"{digit}.json").read_text())
            flat = blob["data"]
            for i in range(0, len(flat), 784):
                pixels = [round(v * 255) for v in flat[i : i + 784]]
                assert all(0 <= p <= 255 for p in pixels)
                examples.append((pixels, digit))

    random.Random(SEED).shuffle(examples)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", examples[:TRAIN]), ("t10k", examples[TRAIN:])):
        images = [p for pixels, _ in part for p in pixels]
        labels = [y for _, y in part]
        write_idx(args.out / f"{name}-images-idx3-ubyte.gz", 0x803, (len(part), 28, 28), images)
        write_idx(args.out / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(part),), labels)
        print(f"{name}: {len(part)} examples")


if __name__ == "__main__":
    main()
