#!/usr/bin/env python3
"""Download the MNIST IDX files into a local data directory.

The experiment harness falls back to the bundled 8x8 digits fixture when
no IDX files are present, so this download is optional. Run it once with
network access to reproduce results on the full 28x28 dataset:

    python3 scripts/fetch_mnist.py --out data/
    defswap train --config exp.ini   # with [data] dir = data/
"""

import argparse
import gzip
import shutil
import sys
import urllib.error
import urllib.request
from pathlib import Path

FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)
MIRRORS = (
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
)


def fetch(name: str, out_dir: Path) -> bool:
    target = out_dir / name.removesuffix(".gz")
    if target.exists():
        print(f"{target} already present, skipping")
        return True
    last_error = None
    for mirror in MIRRORS:
        url = mirror + name
        try:
            print(f"fetching {url}")
            with urllib.request.urlopen(url, timeout=60) as resp:
                payload = resp.read()
        except (urllib.error.URLError, OSError) as exc:
            last_error = exc
            continue
        archive = out_dir / name
        archive.write_bytes(payload)
        with gzip.open(archive, "rb") as src, open(target, "wb") as dst:
            shutil.copyfileobj(src, dst)
        archive.unlink()
        print(f"wrote {target} ({target.stat().st_size} bytes)")
        return True
    print(f"could not download {name}: {last_error}", file=sys.stderr)
    return False


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("data"),
                        help="directory for the IDX files (default: data/)")
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    if not all([fetch(name, args.out) for name in FILES]):
        print("download incomplete; the harness will keep using the "
              "bundled digits fixture", file=sys.stderr)
        return 1
    print(f"all four IDX files in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
