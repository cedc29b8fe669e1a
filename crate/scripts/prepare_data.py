"""Builds the bundled desk-scale datasets under data/.

MNIST subsets are cut from the standard IDX files (for example from the
`mnist-data` npm package). The text corpus is built from the public-domain
1769 King James Bible verse file shipped in the `kjv` npm package.

    python3 scripts/prepare_data.py --mnist DIR --kjv verses-1769.json
"""

import argparse
import json
import random
import re
import struct
from pathlib import Path


def cut_idx(src: Path, dst: Path, count: int) -> None:
    raw = src.read_bytes()
    magic, n = struct.unpack(">II", raw[:8])
    if magic == 0x803:
        rows, cols = struct.unpack(">II", raw[8:16])
        body = raw[16 : 16 + count * rows * cols]
        header = struct.pack(">IIII", magic, count, rows, cols)
    elif magic == 0x801:
        body = raw[8 : 8 + count]
        header = struct.pack(">II", magic, count)
    else:
        raise SystemExit(f"{src}: unknown magic {magic:#x}")
    if count > n:
        raise SystemExit(f"{src}: only {n} items")
    dst.write_bytes(header + body)


def sentences(verse: str):
    verse = verse.replace("[", "").replace("]", "").replace("#", "").replace("¶", "")
    verse = verse.lower()
    verse = re.sub(r"([.,;:?!()])", r" \1 ", verse)
    words = verse.split()
    cur = []
    for w in words:
        cur.append(w)
        if w in {".", "?", "!"}:
            yield cur
            cur = []
    if cur:
        yield cur


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--mnist", type=Path, required=True)
    ap.add_argument("--kjv", type=Path, required=True)
    ap.add_argument("--out", type=Path, default=Path("data"))
    ap.add_argument("--train", type=int, default=10000)
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--sentences", type=int, default=12000)
    ap.add_argument("--test-sentences", type=int, default=1000)
    args = ap.parse_args()

    mn = args.out / "mnist"
    mn.mkdir(parents=True, exist_ok=True)
    for split, count in (("train", args.train), ("t10k", args.test)):
        for kind in ("images-idx3", "labels-idx1"):
            name = f"{split}-{kind}-ubyte"
            cut_idx(args.mnist / name, mn / name, count)

    verses = json.loads(args.kjv.read_text())
    sents = []
    for text in verses.values():
        for s in sentences(text):
            if 3 <= len(s) <= 32:
                sents.append(" ".join(s))
    random.Random(1769).shuffle(sents)
    need = args.sentences + args.test_sentences
    if len(sents) < need:
        raise SystemExit(f"only {len(sents)} sentences available")
    tx = args.out / "text"
    tx.mkdir(parents=True, exist_ok=True)
    (tx / "train.txt").write_text("\n".join(sents[: args.sentences]) + "\n")
    (tx / "test.txt").write_text("\n".join(sents[args.sentences : need]) + "\n")


if __name__ == "__main__":
    main()
