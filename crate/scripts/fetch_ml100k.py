#!/usr/bin/env python3
"""Materialize MovieLens-100K `u.data` under data/ml-100k/.

grouplens.org is preferred; when it is unreachable the ratings table bundled
with the pytorch-widedeep wheel on PyPI is used instead (identical rows).
"""
import io
import os
import subprocess
import sys
import tempfile
import urllib.request
import zipfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
OUT = os.path.join(ROOT, "data", "ml-100k", "u.data")
URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"


def from_grouplens():
    with urllib.request.urlopen(URL, timeout=20) as resp:
        z = zipfile.ZipFile(io.BytesIO(resp.read()))
    return z.read("ml-100k/u.data")


def from_wheel():
    import pandas as pd

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "pytorch-widedeep==1.7.0",
             "--no-deps", "-q", "-d", tmp]
        )
        whl = next(f for f in os.listdir(tmp) if f.endswith(".whl"))
        z = zipfile.ZipFile(os.path.join(tmp, whl))
        blob = z.read("pytorch_widedeep/datasets/data/MovieLens100k_data.parquet.brotli")
    df = pd.read_parquet(io.BytesIO(blob))
    lines = (
        f"{u}\t{i}\t{r}\t{t}\n"
        for u, i, r, t in df[["user_id", "movie_id", "rating", "timestamp"]].itertuples(index=False)
    )
    return "".join(lines).encode()


def main():
    if os.path.exists(OUT):
        print(f"{OUT} already present")
        return
    os.makedirs(os.path.dirname(OUT), exist_ok=True)
    try:
        data = from_grouplens()
    except Exception as err:  # noqa: BLE001
        print(f"grouplens unavailable ({err}); using PyPI mirror copy")
        data = from_wheel()
    with open(OUT, "wb") as fh:
        fh.write(data)
    n_lines = data.count(b"\n")
    print(f"wrote {OUT} ({n_lines} lines)")


if __name__ == "__main__":
    main()
