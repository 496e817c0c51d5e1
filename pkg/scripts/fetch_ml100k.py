"""Materialize MovieLens-100K as ``data/ml-100k/u.data``.

The GroupLens host is not always reachable, but the RecBole wheel on PyPI
bundles the same 100,000 ratings as ``ml-100k.inter`` (u.data plus a
header line). This script downloads that wheel with pip and strips the
header so the output is byte-compatible with the original u.data layout.

    python scripts/fetch_ml100k.py [--out data/ml-100k/u.data]
"""

import argparse
import glob
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/ml-100k/u.data")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-d", tmp, "recbole==1.2.1"],
            check=True,
        )
        wheel = glob.glob(f"{tmp}/recbole-*.whl")[0]
        text = zipfile.ZipFile(wheel).read(MEMBER).decode()

    lines = text.splitlines()
    if lines and lines[0].startswith("user_id"):
        lines = lines[1:]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} lines to {out}")


if __name__ == "__main__":
    main()
