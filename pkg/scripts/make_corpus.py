"""Build a deterministic raw-byte corpus from the Python standard library sources.

    python scripts/make_corpus.py --out data/corpus.bin --size 1500000
"""

import argparse
import sysconfig
from pathlib import Path


def build(size: int) -> bytes:
    root = Path(sysconfig.get_paths()["stdlib"])
    chunks, total = [], 0
    for f in sorted(root.glob("*.py")):
        data = f.read_bytes()
        chunks.append(data)
        total += len(data)
        if total >= size:
            break
    return b"".join(chunks)[:size]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/corpus.bin")
    ap.add_argument("--size", type=int, default=1_500_000)
    args = ap.parse_args()
    data = build(args.size)
    if len(data) < args.size:
        raise SystemExit(f"only {len(data)} bytes of stdlib source available")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    print(f"wrote {len(data)} bytes to {out}")


if __name__ == "__main__":
    main()
