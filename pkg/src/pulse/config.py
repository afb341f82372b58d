"""Pipeline configuration: a JSON document with one section per stage."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .normalize import CONCATENATED, DEFAULT_MIN_LEN, DEFAULT_THRESHOLD, STYLES
from .synth import SyntheticSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerSettings:
    vocab_size: int = 30_000
    punctuation_split: bool = False


@dataclass(frozen=True)
class ModelSettings:
    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 4
    ffn: int = 256
    max_len: int = 128
    attention: str = "bidirectional"
    pooling: str = "first_token"
    dropout: float = 0.0


@dataclass(frozen=True)
class TrainingSettings:
    epochs: int = 3
    batch_size: int = 16
    lr: float = 3e-4


@dataclass(frozen=True)
class SVMSettings:
    C: float = 1.0
    epochs: int = 2000


@dataclass(frozen=True)
class PipelineConfig:
    manifest: str | None = None
    output_dir: str = "pulse-out"
    style: str = CONCATENATED
    address_threshold: int = DEFAULT_THRESHOLD
    min_len: int = DEFAULT_MIN_LEN
    stats_max_len: int = 256
    tokenizer: TokenizerSettings = field(default_factory=TokenizerSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    svm: SVMSettings = field(default_factory=SVMSettings)
    synthetic: SyntheticSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if self.style not in STYLES:
            raise ConfigError(f"style must be one of {STYLES}")
        if self.min_len < 1:
            raise ConfigError("min_len must be positive")
        if self.manifest is None and self.synthetic is None:
            raise ConfigError("config needs a manifest or a synthetic corpus spec")

    def stage_seed(self, stage: str) -> int:
        """Every stage seed is derived from the single global seed."""
        digest = hashlib.sha256(f"{self.seed}:{stage}".encode()).digest()
        return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synthetic"] = None if self.synthetic is None else self.synthetic.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def with_overrides(self, **kw) -> "PipelineConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            for key, sub in (("tokenizer", TokenizerSettings), ("model", ModelSettings),
                             ("training", TrainingSettings), ("svm", SVMSettings)):
                if key in d and isinstance(d[key], dict):
                    d[key] = sub(**d[key])
            if d.get("synthetic") is not None:
                d["synthetic"] = SyntheticSpec.from_dict(d["synthetic"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)
