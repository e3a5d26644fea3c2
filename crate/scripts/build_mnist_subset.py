#!/usr/bin/env python3
"""Build a 10k-digit MNIST subset in IDX format from the `mnist` npm package.

The npm package ships 10,000 MNIST digits as JSON arrays of pixel/255 values
rounded to three decimals; rounding back to bytes is exact. The digits are
shuffled with a fixed seed and split 8,000 train / 2,000 test.

Usage: scripts/build_mnist_subset.py <unpacked npm package dir> <out dir>
"""
import json
import os
import random
import struct
import sys


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    samples = []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        assert len(flat) % 784 == 0
        for i in range(len(flat) // 784):
            px = bytes(int(round(v * 255)) for v in flat[i * 784:(i + 1) * 784])
            samples.append((px, digit))
    random.Random(20200101).shuffle(samples)
    os.makedirs(out, exist_ok=True)
    splits = {"train": samples[:8000], "t10k": samples[8000:]}
    for name, rows in splits.items():
        with open(os.path.join(out, f"{name}-images-idx3-ubyte"), "wb") as f:
            f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
            for px, _ in rows:
                f.write(px)
        with open(os.path.join(out, f"{name}-labels-idx1-ubyte"), "wb") as f:
            f.write(struct.pack(">II", 0x00000801, len(rows)))
            f.write(bytes(label for _, label in rows))
    print(f"wrote {len(samples)} digits to {out}")


if __name__ == "__main__":
    main()
