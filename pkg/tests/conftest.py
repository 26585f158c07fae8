"""Shared fixtures: tiny float64 models with non-degenerate weights."""

from __future__ import annotations

import numpy as np
import pytest

from looplab.backbone import derive_dims, init_weights


def tiny_config(depth=2, d_model=64, **kw):
    kw.setdefault("seq_len", 16)
    return derive_dims(depth, 258, d_model=d_model, **kw)


def perturbed_weights(config, seed=0, scale=0.05, dtype=np.float64):
    """Init weights, then add noise so zero-initialised output projections
    carry gradient through every path."""
    w = init_weights(config, seed, dtype)
    rng = np.random.default_rng(seed + 1000)
    for name, t in w.named_parameters().items():
        if name == "wte":
            continue
        t.data = t.data + rng.normal(0.0, scale, size=t.shape).astype(dtype)
    return w


def random_tokens(config, B=2, T=8, seed=0):
    return np.random.default_rng(seed).integers(0, config.vocab_size_raw, size=(B, T))


@pytest.fixture
def cfg64():
    return tiny_config()


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
