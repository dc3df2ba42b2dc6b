#!/usr/bin/env python3
"""Builds data/shakespeare.txt from the public-domain texts shipped in the
`shakespeare` sdist on PyPI (Open Shakespeare, Gutenberg editions).

Plays are sorted by file name and joined with <|endoftext|> separators.
"""

import argparse
import pathlib
import subprocess
import sys
import tarfile
import tempfile

PACKAGE = "shakespeare==0.6"
SEPARATOR = "<|endoftext|>"


def collect(texts_dir: pathlib.Path) -> list[str]:
    files = sorted(p for p in texts_dir.glob("*_gut.txt"))
    if not files:
        raise SystemExit(f"no *_gut.txt files under {texts_dir}")
    docs = []
    for p in files:
        raw = p.read_bytes().decode("utf-8", errors="replace")
        text = raw.replace("\r\n", "\n").replace("\r", "\n").strip()
        if text:
            docs.append(text)
    return docs


def find_texts(root: pathlib.Path) -> pathlib.Path:
    hits = list(root.rglob("shksprdata/texts"))
    if not hits:
        raise SystemExit(f"texts directory not found under {root}")
    return hits[0]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/shakespeare.txt", type=pathlib.Path)
    ap.add_argument("--source", type=pathlib.Path,
                    help="already extracted sdist or .tar.gz (skips the download)")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        src = args.source
        if src is None:
            subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps",
                            "--no-binary", ":all:", "-d", str(tmp), PACKAGE], check=True)
            src = next(tmp.glob("shakespeare-*.tar.gz"))
        if src.is_file():
            with tarfile.open(src) as tar:
                tar.extractall(tmp / "x")
            src = tmp / "x"
        docs = collect(find_texts(src))

    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(f"\n{SEPARATOR}\n".join(docs) + "\n", encoding="utf-8")
    print(f"wrote {len(docs)} documents to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
