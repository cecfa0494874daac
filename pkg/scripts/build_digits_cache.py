#!/usr/bin/env python3
"""Regenerate the bundled digits fixture from scikit-learn's copy of the
UCI handwritten digits scans (1797 images, 8x8, intensities 0..16).

The fixture ships with the package so the full pipeline runs without
network access; this script only needs to run when refreshing it.
"""

import argparse
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--out",
        type=Path,
        default=Path(__file__).resolve().parent.parent / "src/defswap/fixtures/digits.npz",
        help="where to write the fixture (default: package fixtures dir)",
    )
    args = parser.parse_args()

    bunch = load_digits()
    images = bunch.images.astype(np.uint8)  # (1797, 8, 8), values 0..16
    labels = bunch.target.astype(np.uint8)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(args.out, images=images, labels=labels)
    print(f"wrote {args.out} ({args.out.stat().st_size} bytes, "
          f"{len(images)} images)")


if __name__ == "__main__":
    main()
