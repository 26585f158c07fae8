"""Generate synthetic CORE-style task files from the held-out tail of a corpus.

Three files are written, one per scoring mode: multiple choice (true next
bytes vs. random snippets), schema (true vs. random preceding context) and
language modelling (greedy reproduction of the next few bytes).
"""

import argparse
from pathlib import Path

import numpy as np

from looplab.data import read_bytes
from looplab.evaluation import EvalTask


def _text(b: bytes) -> str:
    return b.decode("latin-1")


def build_tasks(val: bytes, n_items: int, seed: int) -> list[EvalTask]:
    rng = np.random.default_rng(seed)
    ctx_len, cont_len = 48, 12

    def snippet(n):
        o = int(rng.integers(0, len(val) - n))
        return val[o : o + n]

    mc, schema, lm = [], [], []
    for _ in range(n_items):
        o = int(rng.integers(0, len(val) - ctx_len - cont_len))
        ctx, cont = val[o : o + ctx_len], val[o + ctx_len : o + ctx_len + cont_len]
        cands = [snippet(cont_len) for _ in range(3)]
        gold = int(rng.integers(0, 4))
        cands.insert(gold, cont)
        mc.append({"context": _text(ctx), "candidates": [_text(c) for c in cands], "gold": gold})
        alt = snippet(ctx_len)
        gold = int(rng.integers(0, 2))
        ctxs = [alt]
        ctxs.insert(gold, ctx)
        schema.append({"contexts": [_text(c) for c in ctxs], "continuation": _text(cont), "gold": gold})
        lm.append({"context": _text(ctx), "continuation": _text(cont[:3]), "gold": 0})
    return [
        EvalTask("mc_next_snippet", "multiple_choice", mc, a_rand=0.25, delimiter=""),
        EvalTask("schema_context", "schema", schema, a_rand=0.5, delimiter=""),
        EvalTask("lm_next_bytes", "language_modeling", lm, a_rand=256.0 ** -3, delimiter=""),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", default="data/corpus.bin")
    ap.add_argument("--split", type=float, default=0.05)
    ap.add_argument("--out", default="data/tasks")
    ap.add_argument("--items", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    raw = read_bytes(args.corpus)
    val = raw[len(raw) - int(len(raw) * args.split) :]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for task in build_tasks(val, args.items, args.seed):
        task.dump(out / f"{task.name}.jsonl")
        print(out / f"{task.name}.jsonl")


if __name__ == "__main__":
    main()
