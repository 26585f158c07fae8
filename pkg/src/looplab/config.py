"""Experiment configuration: nested dataclasses loaded from strict YAML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig, ConfigError, derive_dims
from .data import ByteTokenizer
from .diagnostics import CollapseCriteria
from .loops import LoopVariant


@dataclass
class ModelSection:
    depth: int = 2
    vocab_size_raw: int = ByteTokenizer().vocab_size_raw
    attn_type: str = "full"
    n_kv_head: int | None = None
    window_pattern: str = "L"
    mla_rank: int = 128
    seq_len: int = 128
    d_model: int | None = None


@dataclass
class LoopSection:
    k_train: int = 3
    variant: str = "FLT"


@dataclass
class OptimSection:
    batch_tokens: int = 4096
    device_batch: int = 32
    total_steps: int | None = None  # None -> 20 tokens per non-embedding parameter
    seed: int = 0
    checkpoint_every: int | None = None  # None -> every 25% of training
    dtype: str = "float32"


@dataclass
class DataSection:
    corpus: str = "data/corpus.bin"
    split: float = 0.05


@dataclass
class DiagnosticsSection:
    window: int = 200
    eps_loss: float = 0.01
    sigma_max: float = 0.5
    loss_max: float | None = None
    floor_frac: float = 0.8
    blocks: list[str] | None = None


@dataclass
class EvalSection:
    k_list: list[int] = field(default_factory=lambda: [1, 3, 6, 9, 12])
    tasks: list[str] = field(default_factory=list)
    max_windows: int = 32
    max_items: int | None = None
    every: int | None = None  # validation BPB cadence in steps; None -> final step only


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    loop: LoopSection = field(default_factory=LoopSection)
    optim: OptimSection = field(default_factory=OptimSection)
    data: DataSection = field(default_factory=DataSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    eval: EvalSection = field(default_factory=EvalSection)
    out_dir: str = "runs/default"

    def backbone(self) -> BackboneConfig:
        m = self.model
        return derive_dims(
            m.depth,
            m.vocab_size_raw,
            seq_len=m.seq_len,
            n_kv_head=m.n_kv_head,
            attn_type=m.attn_type,
            mla_rank=m.mla_rank,
            window_pattern=m.window_pattern,
            d_model=m.d_model,
        )

    def criteria(self) -> CollapseCriteria:
        d = self.diagnostics
        return CollapseCriteria(d.window, d.eps_loss, d.sigma_max, d.loss_max, d.floor_frac)

    def validate(self) -> "ExperimentConfig":
        try:
            LoopVariant.parse(self.loop.variant)
        except ValueError as e:
            raise ConfigError(f"loop.variant: {e}") from None
        if self.loop.k_train < 1:
            raise ConfigError("loop.k_train: must be >= 1")
        if self.optim.batch_tokens < 1 or self.optim.device_batch < 1:
            raise ConfigError("optim.batch_tokens / optim.device_batch: must be positive")
        if self.optim.dtype not in ("float32", "float64"):
            raise ConfigError("optim.dtype: must be float32 or float64")
        if any(k < 1 for k in self.eval.k_list):
            raise ConfigError("eval.k_list: loop counts must be positive")
        try:
            self.backbone()
            self.criteria()
        except (ConfigError, ValueError) as e:
            raise ConfigError(f"model/diagnostics: {e}") from None
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d or {}, "").validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(yaml.safe_load(f))

    def dump(self, path=None) -> str:
        text = yaml.safe_dump(self.to_dict(), sort_keys=False)
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _build(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key {prefix + sorted(unknown)[0]!r}")
    kwargs = {}
    for name, value in d.items():
        sub = _SECTIONS.get(name) if cls is ExperimentConfig else None
        kwargs[name] = _build(sub, value, f"{name}.") if sub else value
    return cls(**kwargs)


_SECTIONS = {
    "model": ModelSection,
    "loop": LoopSection,
    "optim": OptimSection,
    "data": DataSection,
    "diagnostics": DiagnosticsSection,
    "eval": EvalSection,
}
