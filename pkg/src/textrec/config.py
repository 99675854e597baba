"""Run configuration: nested dataclasses read from flat ``section.key = value`` files."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    interactions: str = ""
    items: str = ""
    workdir: str = "work"


@dataclass
class PreprocessConfig:
    min_count: int = 5
    min_timestamp: typing.Optional[int] = None
    max_timestamp: typing.Optional[int] = None


@dataclass
class VerbalizeSection:
    attributes: tuple[str, ...] = ("title",)
    include_item_id: bool = True
    include_user_id: bool = False
    item_max_len: int = 32
    sessions: int = 2
    session_len: int = 256
    vocab_size: int = 30000


@dataclass
class ModelSection:
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 1
    dropout: float = 0.0
    id_fusion: str = "off"
    dtype: str = "float32"


@dataclass
class TrainSection:
    batch_size: int = 8
    learning_rate: float = 1e-4
    warmup_proportion: float = 0.1
    total_steps: int = 1000
    grad_clip_norm: float = 0.0
    remine_every: int = 0
    hard_learning_rate: float = 5e-5
    hard_warmup_proportion: float = 0.0


@dataclass
class StrategySection:
    kind: str = "random"
    k: int = 9
    popular_set_size: int = 500
    hard_pool_size: int = 100
    popularity_basis: str = "full"
    shared_pool: bool = True


@dataclass
class EvalSection:
    ks: tuple[int, ...] = (10, 20)
    mask_history: bool = False
    top_k: int = 5
    split: str = "test"


@dataclass
class AnalysisSection:
    tail_fraction: float = 0.2
    top_k: int = 5
    popular_set_size: int = 500
    popularity_basis: str = "full"
    export_per_group: int = 50


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    verbalize: VerbalizeSection = field(default_factory=VerbalizeSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    strategy: StrategySection = field(default_factory=StrategySection)
    eval: EvalSection = field(default_factory=EvalSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    seed: typing.Optional[int] = None
    threads: int = 1

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)


# short names accepted on the command line and in files
ALIASES = {
    "batch_size": "train.batch_size",
    "lr": "train.learning_rate",
    "warmup": "train.warmup_proportion",
    "total_steps": "train.total_steps",
}

_SECTION_HINTS = typing.get_type_hints(RunConfig)


def _coerce(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        if raw.lower() in ("", "none", "null"):
            return None
        inner = [a for a in typing.get_args(tp) if a is not type(None)][0]
        return _coerce(raw, inner, key)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        return tuple(_coerce(p, inner, key) for p in raw.split(",") if p.strip())
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from None
    return raw


def set_key(cfg: RunConfig, key: str, raw: str) -> None:
    key = ALIASES.get(key, key)
    parts = key.split(".")
    if len(parts) == 1:
        if parts[0] not in ("seed", "threads"):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, parts[0], _coerce(raw, _SECTION_HINTS[parts[0]], key))
        return
    if len(parts) != 2 or parts[0] not in _SECTION_HINTS:
        raise ConfigError(f"unknown config key {key!r}")
    section = getattr(cfg, parts[0])
    hints = typing.get_type_hints(type(section))
    if parts[1] not in hints:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(section, parts[1], _coerce(raw, hints[parts[1]], key))


def parse_config(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        set_key(cfg, key.strip(), value)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def flatten(cfg: RunConfig) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for g in dataclasses.fields(value):
                out[f"{f.name}.{g.name}"] = _fmt(getattr(value, g.name))
        else:
            out[f.name] = _fmt(value)
    return out


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flatten(cfg).items())
