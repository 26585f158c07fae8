"""Language-modelling metrics, CORE-style task scoring and loop-budget sweeps."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .backbone import BackboneConfig, ModelWeights
from .data import ByteTokenizer, DegenerateInputError
from .loops import LoopVariant, loop_forward

FEWSHOT_SEED = 1234
SHUFFLE_SEED = 1337
TASK_KINDS = ("multiple_choice", "schema", "language_modeling")


# ---- scalar metrics -------------------------------------------------------

def bpb(per_token_losses, byte_counts) -> float:
    """sum(loss) / (ln 2 * sum(bytes)) over positions with bytes > 0 and a loss.

    NaN losses mark ignore-masked positions.
    """
    loss = np.asarray(per_token_losses, dtype=np.float64).reshape(-1)
    b = np.asarray(byte_counts, dtype=np.float64).reshape(-1)
    if loss.shape != b.shape:
        raise ValueError(f"{loss.size} losses vs {b.size} byte counts")
    keep = (b > 0) & ~np.isnan(loss)
    total_bytes = b[keep].sum()
    if total_bytes <= 0:
        raise DegenerateInputError("no bytes to normalise by")
    return float(loss[keep].sum() / (math.log(2) * total_bytes))


def perplexity(per_token_losses) -> float:
    loss = np.asarray(per_token_losses, dtype=np.float64).reshape(-1)
    loss = loss[~np.isnan(loss)]
    if loss.size == 0:
        raise DegenerateInputError("perplexity of zero tokens")
    return float(np.exp(loss.mean()))


def centered_accuracy(a: float, a_rand: float) -> float:
    """Rescale so that chance maps to 0 and perfect to 1."""
    if a_rand >= 1.0:
        raise DegenerateInputError("random-baseline accuracy of 1 cannot be centred")
    return (a - a_rand) / (1.0 - a_rand)


def core_metric(results: Sequence[tuple[float, float]]) -> float:
    """Unweighted mean of centred accuracies over (accuracy, a_rand) pairs."""
    if not results:
        raise DegenerateInputError("no tasks")
    return float(np.mean([centered_accuracy(a, r) for a, r in results]))


# ---- model handle -----------------------------------------------------------

@dataclass
class LoopedLM:
    weights: ModelWeights
    config: BackboneConfig
    tokenizer: ByteTokenizer = field(default_factory=ByteTokenizer)

    def logits(self, ids: np.ndarray, K: int, variant) -> np.ndarray:
        with tc.no_grad():
            out, _ = loop_forward(self.weights, self.config, ids, K, variant)
        return out.data

    def token_losses(self, ids: Sequence[int], K: int, variant) -> tuple[np.ndarray, np.ndarray]:
        """Per-position NLL of ids[1:] and the greedy predictions, one sequence."""
        arr = np.asarray([ids], dtype=np.int64)
        lg = self.logits(arr[:, :-1], K, variant)[0].astype(np.float64)
        tgt = arr[0, 1:]
        m = lg.max(axis=1, keepdims=True)
        lse = np.log(np.exp(lg - m).sum(axis=1)) + m[:, 0]
        return lse - lg[np.arange(tgt.size), tgt], lg.argmax(axis=1)


# ---- tasks -----------------------------------------------------------------

@dataclass
class EvalTask:
    name: str
    kind: str
    items: list[dict]
    a_rand: float
    num_fewshot: int = 0
    delimiter: str = " "

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not 0.0 < self.a_rand < 1.0:
            raise ValueError(f"a_rand must be in (0, 1), got {self.a_rand}")
        for it in self.items:
            if self.kind == "multiple_choice" and len(it["candidates"]) < 2:
                raise ValueError("multiple-choice items need >= 2 candidates")
            if self.kind == "schema" and len(it["contexts"]) < 2:
                raise ValueError("schema items need >= 2 contexts")

    @classmethod
    def load(cls, path) -> "EvalTask":
        """One JSON record per line: kind, a_rand, gold plus kind-specific text."""
        path = Path(path)
        items = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        if not items:
            raise DegenerateInputError(f"task file {path} is empty")
        head = items[0]
        return cls(
            name=path.stem,
            kind=head["kind"],
            items=items,
            a_rand=float(head["a_rand"]),
            num_fewshot=int(head.get("num_fewshot", 0)),
            delimiter=head.get("delimiter", " "),
        )

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for it in self.items:
                rec = {"kind": self.kind, "a_rand": self.a_rand, "num_fewshot": self.num_fewshot,
                       "delimiter": self.delimiter, **it}
                f.write(json.dumps(rec) + "\n")


def _demo_text(task: EvalTask, item: dict) -> str:
    d = task.delimiter
    if task.kind == "multiple_choice":
        return item["context"] + d + item["candidates"][item["gold"]]
    if task.kind == "schema":
        return item["contexts"][item["gold"]] + d + item["continuation"]
    return item["context"] + d + item["continuation"]


def fewshot_prefix(task: EvalTask, idx: int) -> str:
    """Demonstrations for item ``idx``, sampled with seed 1234 + idx."""
    k = task.num_fewshot
    if k <= 0:
        return ""
    pool = [i for i in range(len(task.items)) if i != idx]
    picks = random.Random(FEWSHOT_SEED + idx).sample(pool, min(k, len(pool)))
    return "\n\n".join(_demo_text(task, task.items[i]) for i in picks) + "\n\n"


def _truncate(ids: list[int], start: int, limit: int) -> tuple[list[int], int]:
    """Keep the last ``limit + 1`` tokens; shift the scored-span start."""
    if len(ids) <= limit + 1:
        return ids, start
    cut = len(ids) - (limit + 1)
    return ids[cut:], max(start - cut, 1)


def _common_prefix(seqs: list[list[int]]) -> int:
    n = min(len(s) for s in seqs)
    i = 0
    while i < n and all(s[i] == seqs[0][i] for s in seqs):
        i += 1
    return i


def _common_suffix(seqs: list[list[int]]) -> int:
    return _common_prefix([s[::-1] for s in seqs])


def _argmin_first(values: Sequence[float]) -> int:
    best = 0
    for i, v in enumerate(values):
        if v < values[best]:
            best = i
    return best


def score_multiple_choice(model: LoopedLM, item: dict, K: int, variant, prefix: str = "", delimiter: str = " ") -> int:
    """Index of the candidate with the lowest mean loss past the shared prefix."""
    tok = model.tokenizer
    seqs = [tok.encode(prefix + item["context"] + delimiter + c, bos=True) for c in item["candidates"]]
    start = max(1, _common_prefix(seqs))
    losses = []
    for s in seqs:
        st = min(start, len(s) - 1)
        ids, st = _truncate(s, st, model.config.seq_len)
        nll, _ = model.token_losses(ids, K, variant)
        losses.append(float(nll[st - 1 :].mean()))
    return _argmin_first(losses)


def score_schema(model: LoopedLM, item: dict, K: int, variant, prefix: str = "", delimiter: str = " ") -> int:
    """Index of the context under which the shared suffix has the lowest mean loss."""
    tok = model.tokenizer
    seqs = [tok.encode(prefix + c + delimiter + item["continuation"], bos=True) for c in item["contexts"]]
    n_suffix = max(1, _common_suffix(seqs))
    losses = []
    for s in seqs:
        st = max(1, len(s) - n_suffix)
        ids, st = _truncate(s, st, model.config.seq_len)
        nll, _ = model.token_losses(ids, K, variant)
        losses.append(float(nll[st - 1 :].mean()))
    return _argmin_first(losses)


def score_language_modeling(model: LoopedLM, item: dict, K: int, variant, prefix: str = "", delimiter: str = " ") -> bool:
    """Correct iff greedy decoding reproduces the continuation exactly."""
    tok = model.tokenizer
    ctx = tok.encode(prefix + item["context"] + delimiter, bos=True)
    ids = ctx + tok.encode(item["continuation"])
    start = len(ctx)
    ids, start = _truncate(ids, start, model.config.seq_len)
    _, pred = model.token_losses(ids, K, variant)
    return bool(np.array_equal(pred[start - 1 :], np.asarray(ids[start:])))


def evaluate_task(model: LoopedLM, task: EvalTask, K: int, variant, max_items: int | None = None) -> float:
    """Raw accuracy over the (seed-1337 shuffled) task items."""
    order = list(range(len(task.items)))
    random.Random(SHUFFLE_SEED).shuffle(order)
    if max_items is not None and max_items >= 0:
        order = order[:max_items]
    correct = 0
    for idx in order:
        item = task.items[idx]
        prefix = fewshot_prefix(task, idx)
        if task.kind == "multiple_choice":
            ok = score_multiple_choice(model, item, K, variant, prefix, task.delimiter) == item["gold"]
        elif task.kind == "schema":
            ok = score_schema(model, item, K, variant, prefix, task.delimiter) == item["gold"]
        else:
            ok = score_language_modeling(model, item, K, variant, prefix, task.delimiter)
        correct += int(ok)
    return correct / len(order)


# ---- corpus-level LM evaluation -------------------------------------------

def lm_eval(model: LoopedLM, windows: np.ndarray, K: int, variant, batch: int = 16) -> dict[str, float]:
    """BPB, perplexity and mean loss over (N, T+1) validation windows."""
    if len(windows) == 0:
        raise DegenerateInputError("no validation windows")
    counts = model.tokenizer.byte_counts(model.config.vocab_size)
    losses, nbytes = [], []
    for i in range(0, len(windows), batch):
        w = np.asarray(windows[i : i + batch], dtype=np.int64)
        lg = model.logits(w[:, :-1], K, variant).astype(np.float64)
        tgt = w[:, 1:]
        m = lg.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(lg - m).sum(axis=-1)) + m[..., 0]
        nll = lse - np.take_along_axis(lg, tgt[..., None], axis=-1)[..., 0]
        losses.append(nll.reshape(-1))
        nbytes.append(counts[tgt].reshape(-1))
    loss = np.concatenate(losses)
    b = np.concatenate(nbytes)
    return {"bpb": bpb(loss, b), "ppl": perplexity(loss), "loss": float(loss.mean())}


def standard_eval(model: LoopedLM, windows, tasks: Sequence[EvalTask], K: int, variant, max_items=None) -> dict[str, float]:
    out = lm_eval(model, windows, K, variant)
    if tasks:
        accs = [(evaluate_task(model, t, K, variant, max_items), t.a_rand) for t in tasks]
        out["core"] = core_metric(accs)
    return out


@dataclass
class BudgetCurve:
    metric: str
    points: list[tuple[int, float]]

    def __post_init__(self):
        ks = [k for k, _ in self.points]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("budget curve K values must be strictly increasing")


def budget_eval(model: LoopedLM, windows, tasks, K_list: Sequence[int], variant, max_items=None) -> dict[str, BudgetCurve]:
    """Evaluate one set of weights at several loop counts."""
    K_list = sorted(set(int(k) for k in K_list))
    if not K_list or K_list[0] <= 0:
        raise ValueError("loop counts must be positive")
    variant = LoopVariant.parse(variant)
    per_k = {k: standard_eval(model, windows, tasks, k, variant, max_items) for k in K_list}
    metrics = list(per_k[K_list[0]])
    return {m: BudgetCurve(m, [(k, per_k[k][m]) for k in K_list]) for m in metrics}
