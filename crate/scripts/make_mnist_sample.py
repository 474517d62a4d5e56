#!/usr/bin/env python3
"""Convert the 10k-digit MNIST sample shipped in the npm `mnist` package
(src/digits/<d>.json, pixels in [0,1]) into gzipped IDX files.

Usage: make_mnist_sample.py <npm-package-dir> <out-dir>

Per class, the first 80% of the digits go to the train pool and the rest to
the test pool. Classes are interleaved round-robin in the output files.
"""
import gzip
import json
import struct
import sys
from pathlib import Path

SIDE = 28


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    per_class = []
    for d in range(10):
        raw = json.loads((src / "src" / "digits" / f"{d}.json").read_text())["data"]
        n = len(raw) // (SIDE * SIDE)
        imgs = [
            bytes(int(round(v * 255)) for v in raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE])
            for i in range(n)
        ]
        per_class.append(imgs)
    pools = {"train": [[] for _ in range(10)], "t10k": [[] for _ in range(10)]}
    for d, imgs in enumerate(per_class):
        cut = int(len(imgs) * 0.8)
        pools["train"][d] = imgs[:cut]
        pools["t10k"][d] = imgs[cut:]
    for name, classes in pools.items():
        images, labels = [], []
        longest = max(len(c) for c in classes)
        for i in range(longest):
            for d in range(10):
                if i < len(classes[d]):
                    images.append(classes[d][i])
                    labels.append(d)
        with gzip.GzipFile(out / f"{name}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(images), SIDE, SIDE))
            for img in images:
                f.write(img)
        with gzip.GzipFile(out / f"{name}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(labels)))
            f.write(bytes(labels))
        print(name, len(images))


if __name__ == "__main__":
    main()
