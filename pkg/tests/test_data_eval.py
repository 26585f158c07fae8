import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from looplab.data import ByteTokenizer, DegenerateInputError, TokenStream, load_corpus, unigram_entropy_nats
from looplab.evaluation import (
    BudgetCurve,
    EvalTask,
    LoopedLM,
    _truncate,
    bpb,
    budget_eval,
    centered_accuracy,
    core_metric,
    evaluate_task,
    fewshot_prefix,
    lm_eval,
    perplexity,
    score_language_modeling,
    score_multiple_choice,
    score_schema,
    standard_eval,
)

from conftest import perturbed_weights, tiny_config

TOK = ByteTokenizer()


@settings(max_examples=50, deadline=None)
@given(st.binary(max_size=200))
def test_tokenizer_round_trip(data):
    ids = TOK.encode(data, bos=True)
    assert ids[0] == TOK.bos and len(ids) == len(data) + 1
    assert TOK.decode(ids) == data


def test_tokenizer_specials_carry_no_bytes():
    assert TOK.vocab_size_raw == 258
    b = TOK.byte_counts(320)
    assert b[:256].sum() == 256 and b[256:].sum() == 0
    assert TOK.encode("é") == [0xC3, 0xA9]


def test_unigram_entropy():
    assert unigram_entropy_nats(bytes(range(256)) * 3) == pytest.approx(math.log(256))
    assert unigram_entropy_nats(b"aab") == pytest.approx(-(2 / 3) * math.log(2 / 3) - (1 / 3) * math.log(1 / 3))
    assert unigram_entropy_nats(b"zzzz") == 0.0


def test_token_stream_sampling():
    s = TokenStream(np.arange(100), seq_len=9, seed=5)
    batch = s.sample(4)
    assert batch.shape == (4, 10)
    assert np.all(np.diff(batch, axis=1) == 1)  # contiguous windows
    assert np.array_equal(TokenStream(np.arange(100), 9, 5).sample(4), batch)
    w = s.windows(3)
    assert w.shape == (3, 10) and w[1, 0] == 10
    with pytest.raises(DegenerateInputError):
        TokenStream(np.arange(5), 9).sample(1)


def test_load_corpus_split(tmp_path):
    p = tmp_path / "c.bin"
    p.write_bytes(bytes(range(200)) * 5)
    tr, va = load_corpus(p, 0.1, 0, 16)
    assert len(tr) == 900 and len(va) == 100
    assert va.tokens[0] == (900 % 200)
    with pytest.raises(DegenerateInputError):
        load_corpus(p, 0.1, 0, 2000)
    with pytest.raises(OSError):
        load_corpus(tmp_path / "missing.bin", 0.1, 0, 16)


def test_bpb_formulas():
    loss = np.array([1.0, 2.0, 3.0])
    assert bpb(loss, [1, 1, 1]) == pytest.approx(loss.mean() / math.log(2), abs=1e-12)
    # a special token (0 bytes) changes nothing, however large its loss
    assert bpb(np.r_[loss, 50.0], [1, 1, 1, 0]) == bpb(loss, [1, 1, 1])
    assert bpb(np.r_[loss, np.nan], [1, 1, 1, 1]) == bpb(loss, [1, 1, 1])
    assert bpb([2.0, 2.0], [2, 2]) == pytest.approx(1 / math.log(2))
    with pytest.raises(DegenerateInputError):
        bpb([1.0], [0])


def test_perplexity_and_centered_accuracy():
    V = 320
    assert perplexity(np.full(10, math.log(V))) == pytest.approx(V, rel=1e-12)
    assert centered_accuracy(0.25, 0.25) == 0.0
    assert centered_accuracy(1.0, 0.25) == 1.0
    assert centered_accuracy(0.5, 0.25) == pytest.approx(1 / 3, abs=1e-12)
    assert core_metric([(1.0, 0.5), (0.5, 0.5)]) == pytest.approx(0.5)
    with pytest.raises(DegenerateInputError):
        centered_accuracy(0.5, 1.0)
    with pytest.raises(DegenerateInputError):
        perplexity([])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 0.99))
def test_centered_accuracy_affine(a, r):
    c = centered_accuracy(a, r)
    assert c * (1 - r) + r == pytest.approx(a, abs=1e-12)


class StubModel:
    """Loss 0 on target byte ord('a'), 1 elsewhere; predicts the true next token."""

    def __init__(self, seq_len=64):
        self.tokenizer = ByteTokenizer()
        self.config = tiny_config(seq_len=seq_len)
        self.calls = []

    def token_losses(self, ids, K, variant):
        self.calls.append(list(ids))
        tgt = np.asarray(ids[1:])
        return np.where(tgt == ord("a"), 0.0, 1.0), tgt.copy()


def test_multiple_choice_and_schema_scoring():
    m = StubModel()
    assert score_multiple_choice(m, {"context": "q:", "candidates": ["bbb", "aaa", "aab"]}, 1, "FLT") == 1
    # ties resolve to the lowest index
    assert score_multiple_choice(m, {"context": "q:", "candidates": ["bb", "cc"]}, 1, "FLT") == 0
    # schema scores only the shared suffix, so the context choice alone does not decide
    item = {"contexts": ["aaaa", "bbbb"], "continuation": "xa"}
    assert score_schema(m, item, 1, "FLT") == 0
    assert score_language_modeling(m, {"context": "ab", "continuation": "cd"}, 1, "FLT")


def test_truncation_keeps_tail():
    ids, start = _truncate(list(range(100)), 95, 16)
    assert ids == list(range(83, 100)) and start == 12
    assert _truncate([1, 2, 3], 1, 16) == ([1, 2, 3], 1)
    m = StubModel(seq_len=16)
    score_multiple_choice(m, {"context": "x" * 100, "candidates": ["a", "b"]}, 1, "FLT")
    assert all(len(c) <= 17 for c in m.calls)


def make_task(n=10, kind="multiple_choice", fewshot=0):
    items = [{"context": f"c{i}", "candidates": ["aa", "bb"], "gold": i % 2} for i in range(n)]
    return EvalTask("t", kind, items, 0.5, fewshot, " ")


def test_fewshot_prefix_seeded_and_excludes_item():
    t = make_task(fewshot=3)
    p = fewshot_prefix(t, 4)
    assert p == fewshot_prefix(t, 4)
    picks = random.Random(1234 + 4).sample([i for i in range(10) if i != 4], 3)
    assert p == "\n\n".join(f"c{i} " + ["aa", "bb"][i % 2] for i in picks) + "\n\n"
    assert fewshot_prefix(make_task(), 0) == ""


def test_evaluate_task_accuracy_and_shuffle():
    t = make_task()
    # the stub always picks "aa" (index 0), right on the even items
    assert evaluate_task(StubModel(), t, 1, "FLT") == 0.5
    order = list(range(10))
    random.Random(1337).shuffle(order)
    expect = sum(1 for i in order[:3] if i % 2 == 0) / 3
    assert evaluate_task(StubModel(), t, 1, "FLT", max_items=3) == pytest.approx(expect)


def test_eval_task_file_round_trip(tmp_path):
    t = make_task(fewshot=2)
    t.dump(tmp_path / "t.jsonl")
    t2 = EvalTask.load(tmp_path / "t.jsonl")
    assert (t2.kind, t2.a_rand, t2.num_fewshot, len(t2.items)) == ("multiple_choice", 0.5, 2, 10)
    with pytest.raises(ValueError):
        EvalTask("x", "cloze", [], 0.5)
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(DegenerateInputError):
        EvalTask.load(tmp_path / "empty.jsonl")


@pytest.fixture(scope="module")
def tiny_lm():
    c = tiny_config(seq_len=16)
    return LoopedLM(perturbed_weights(c, dtype=np.float32), c)


def test_lm_eval_bpb_equals_mean_loss_over_ln2(tiny_lm):
    windows = np.random.default_rng(0).integers(0, 256, size=(5, 17))
    out = lm_eval(tiny_lm, windows, 2, "FLT", batch=2)
    assert out["bpb"] == pytest.approx(out["loss"] / math.log(2), rel=1e-12)
    assert out["ppl"] == pytest.approx(math.exp(out["loss"]), rel=1e-12)
    with pytest.raises(DegenerateInputError):
        lm_eval(tiny_lm, windows[:0], 2, "FLT")


def test_lm_eval_matches_token_losses(tiny_lm):
    w = np.random.default_rng(1).integers(0, 256, size=(1, 17))
    nll, _ = tiny_lm.token_losses(list(w[0]), 2, "LT")
    assert lm_eval(tiny_lm, w, 2, "LT")["loss"] == pytest.approx(nll.mean(), rel=1e-6)


def test_budget_eval_point_equals_standard_eval(tiny_lm):
    windows = np.random.default_rng(2).integers(0, 256, size=(3, 17))
    tasks = [make_task(4)]
    curves = budget_eval(tiny_lm, windows, tasks, [3, 1, 2], "FLT")
    assert set(curves) == {"bpb", "ppl", "loss", "core"}
    assert [k for k, _ in curves["bpb"].points] == [1, 2, 3]
    std = standard_eval(tiny_lm, windows, tasks, 2, "FLT")
    for name, curve in curves.items():
        assert curve.points[1][1] == std[name]
    with pytest.raises(ValueError):
        budget_eval(tiny_lm, windows, tasks, [0, 1], "FLT")
    with pytest.raises(ValueError):
        BudgetCurve("bpb", [(2, 1.0), (2, 1.0)])
