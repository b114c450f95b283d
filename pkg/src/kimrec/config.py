"""Run configuration: one INI file with [data], [model] and [train] sections.

Unknown keys are rejected. ``dump_config`` writes the canonical form (every
field, fixed section and key order), so ``dump(parse(dump(c))) == dump(c)``.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class DataConfig:
    news: str = ""
    train_behaviors: str = ""
    val_behaviors: str = ""
    test_behaviors: str = ""
    word_vectors: str = ""
    entity_vectors: str = ""
    kg_edges: str = ""


@dataclass
class ModelConfig:
    title_len: int = 30  # M
    num_entities: int = 5  # D
    num_neighbors: int = 10  # B
    history_len: int = 50  # N
    layers: int = 1  # K, shared by the GAT and GCAT stacks
    word_dim: int = 300  # d_g
    text_dim: int = 400  # d_t, CNN filters = word heads * head width
    entity_dim: int = 100  # d_k
    news_dim: int = 400  # d_n
    query_dim: int = 100  # d_q
    word_heads: int = 10
    entity_heads: int = 5
    cnn_window: int = 3
    dropout: float = 0.2

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "dropout":
                if not 0.0 <= v < 1.0:
                    raise ConfigError(f"model.{f.name}", "must be in [0, 1)")
            elif v <= 0:
                raise ConfigError(f"model.{f.name}", "must be positive")
        if self.text_dim % self.word_heads:
            raise ConfigError("model.word_heads", "must divide text_dim")
        if self.entity_dim % self.entity_heads:
            raise ConfigError("model.entity_heads", "must divide entity_dim")
        if self.cnn_window % 2 == 0:
            raise ConfigError("model.cnn_window", "must be odd for same padding")


@dataclass
class TrainConfig:
    negatives: int = 4  # U
    lr: float = 5e-5
    batch_size: int = 16
    epochs: int = 20
    patience: int = 3
    seed: int = 0
    threads: int = 0  # 0 leaves torch's default

    def validate(self) -> None:
        for name in ("negatives", "batch_size", "epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name}", "must be positive")
        if self.lr < 0:
            raise ConfigError("train.lr", "must be non-negative")
        if self.threads < 0:
            raise ConfigError("train.threads", "must be non-negative")


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()

    def replace(self, **sections) -> "Config":
        return dataclasses.replace(self, **sections)


_SECTIONS = ("data", "model", "train")


def _coerce(section: str, f, raw: str):
    try:
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{f.name}", f"cannot parse {raw!r}") from None
    return raw


def parse_config(text: str) -> Config:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc)) from None
    cfg = Config()
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(section, "unknown section")
        target = getattr(cfg, section)
        known = {f.name: f for f in fields(target)}
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"{section}.{key}", "unknown key")
            setattr(target, key, _coerce(section, known[key], raw.strip()))
    cfg.validate()
    return cfg


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: Config) -> str:
    buf = io.StringIO()
    for i, section in enumerate(_SECTIONS):
        if i:
            buf.write("\n")
        buf.write(f"[{section}]\n")
        for f in fields(getattr(cfg, section)):
            v = getattr(getattr(cfg, section), f.name)
            buf.write(f"{f.name} = {v!r}\n" if isinstance(v, float) else f"{f.name} = {v}\n")
    return buf.getvalue()


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply ``section.key=value`` strings (command-line ``--set``)."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(item, "override must look like section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(lhs, "unknown section")
        target = getattr(cfg, section)
        known = {f.name: f for f in fields(target)}
        if key not in known:
            raise ConfigError(lhs, "unknown key")
        setattr(target, key, _coerce(section, known[key], raw.strip()))
    cfg.validate()
    return cfg
