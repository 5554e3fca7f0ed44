"""Run configuration documents (YAML or JSON) with strict key checking."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, field_validator, model_validator

from ..adapter import ModelDims, TiedLoraConfig, TiedLoraMode
from ..errors import ValidationError
from ..nanoformer import TransformerConfig
from ..taskgen import LETTERS, TASK_KINDS, VOCAB
from ..trainkit import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    d: int = Field(64, ge=1)
    layers: int = Field(4, ge=1)
    n_heads: int = Field(4, ge=1)
    vocab_size: int = Field(VOCAB.size, ge=1)
    max_seq_len: int = Field(32, ge=2)
    mlp_mult: int = Field(4, ge=1)
    seed: int = 0

    def build(self) -> TransformerConfig:
        return TransformerConfig(ModelDims(self.d, self.layers), self.n_heads, self.vocab_size, self.max_seq_len, self.mlp_mult)


class AdapterSection(_Strict):
    mode: str = "TABUV"
    r: int = Field(8, ge=1)
    alpha: Optional[float] = None
    init_seed: int = 0
    init_std: Optional[float] = None
    zero_start_override: bool = False

    @field_validator("mode")
    @classmethod
    def _known_mode(cls, v: str) -> str:
        return TiedLoraMode.parse(v).value

    def build(self, dims: ModelDims) -> TiedLoraConfig:
        return TiedLoraConfig(
            mode=self.mode,
            r=self.r,
            dims=dims,
            alpha=self.alpha,
            init_seed=self.init_seed,
            init_std=self.init_std,
            zero_start_override=self.zero_start_override,
        )


class TrainSection(_Strict):
    max_steps: int = 2000
    base_lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 50
    batch_size: int = 32
    val_interval: int = 30
    patience: int = 10
    seed: int = 0
    min_delta: float = 0.0
    max_val_examples: Optional[int] = 256

    def build(self, **overrides) -> TrainConfig:
        return TrainConfig(**{**self.model_dump(), **overrides})


class PretrainSection(TrainSection):
    max_steps: int = 3000
    base_lr: float = 3e-3
    warmup_steps: int = 100
    val_interval: int = 100
    patience: int = 5
    n_per_kind: int = 4000
    held_out_letters: int = 8

    def build(self, **overrides) -> TrainConfig:
        fields = self.model_dump(exclude={"n_per_kind", "held_out_letters"})
        return TrainConfig(**{**fields, **overrides})


class TaskSection(_Strict):
    kind: str = "copy"
    seed: int = 1234
    n_train: int = 2000
    n_val: int = 128
    n_test: int = 200
    max_len: int = 6
    alphabet: str = LETTERS

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, v: str) -> str:
        if v not in TASK_KINDS:
            raise ValueError(f"unknown task kind {v!r}; expected one of {TASK_KINDS}")
        return v


class SweepSection(_Strict):
    modes: list[str] = Field(default_factory=lambda: [m.value for m in TiedLoraMode])
    ranks: list[int] = Field(default_factory=lambda: [2, 8, 32, 128])
    lrs: list[float] = Field(default_factory=lambda: [1e-4, 1e-5])
    seeds: list[int] = Field(default_factory=lambda: [0])
    workers: int = Field(1, ge=1)

    @field_validator("modes")
    @classmethod
    def _known_modes(cls, v: list[str]) -> list[str]:
        return [TiedLoraMode.parse(m).value for m in v]


class RunConfig(_Strict):
    model: ModelSection = Field(default_factory=ModelSection)
    adapter: AdapterSection = Field(default_factory=AdapterSection)
    train: TrainSection = Field(default_factory=TrainSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    task: TaskSection = Field(default_factory=TaskSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    out_dir: str = "runs"

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        if self.model.vocab_size < VOCAB.size:
            raise ValueError(f"model.vocab_size must be >= {VOCAB.size} to cover the task vocabulary")
        if 2 * self.task.max_len + 2 > self.model.max_seq_len:
            raise ValueError(f"task.max_len={self.task.max_len} needs model.max_seq_len >= {2 * self.task.max_len + 2}")
        if self.model.d % self.model.n_heads:
            raise ValueError("model.d must be divisible by model.n_heads")
        return self

    @property
    def transformer(self) -> TransformerConfig:
        return self.model.build()

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.model.d, self.model.layers)


def parse_config(data: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except PydanticError as exc:
        raise ValidationError(f"invalid run config:\n{exc}") from None


def load_config(path: str | Path | None) -> RunConfig:
    """Read a YAML/JSON run config; ``None`` gives the defaults."""
    if path is None:
        return parse_config({})
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ValidationError(f"{path}: top level must be a mapping")
    return parse_config(data)
