#!/usr/bin/env python3
"""Rebuild data/mnist/*.gz from the 10k-digit sample bundled in the `mnist` npm package.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

The digits are stored per class as flat [0,1] floats; they are rescaled to
bytes, interleaved with a fixed shuffle and written as standard IDX files.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    samples = []
    for label in range(10):
        data = json.loads((src / f"{label}.json").read_text())["data"]
        n = len(data) // 784
        for i in range(n):
            px = data[i * 784:(i + 1) * 784]
            samples.append((label, bytes(min(255, max(0, round(v * 255))) for v in px)))
    random.Random(0).shuffle(samples)
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for _, px in samples:
            f.write(px)
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for label, _ in samples))
    print(f"wrote {len(samples)} samples to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
