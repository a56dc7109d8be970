"""Run configuration files: a flat ``model.*`` / ``train.*`` / ``eval.*`` namespace.

Files are YAML (JSON is valid YAML). Sections may be nested mappings or
dotted keys; both flatten to the same namespace. ``key=value`` overrides
from the command line win over file values.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .metrics import EvalProtocol
from .model import ConfigError, ModelConfig
from .training import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "eval": EvalProtocol}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)

    def flat(self) -> dict:
        out = {}
        for name in SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                out[f"{name}.{k}"] = v
        return out

    def dump(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        nested = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        path.write_text(yaml.safe_dump(nested, sort_keys=False))
        return path


def flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value, typ):
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ) if isinstance(typ, str) else typ
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, str):  # YAML 1.1 reads "5e-4" (no dot) as a string
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def build(flat: dict) -> RunConfig:
    sections: dict[str, dict] = {name: {} for name in SECTIONS}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{key}: unknown setting (expected model.*, train.* or eval.*)")
        cls = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        if name not in hints:
            raise ConfigError(f"{key}: unknown setting; valid keys: {sorted(f'{section}.' + h for h in hints)}")
        sections[section][name] = _coerce(key, value, hints[name])
    cfg = RunConfig(ModelConfig(**sections["model"]), TrainConfig(**sections["train"]),
                    EvalProtocol(**sections["eval"]))
    cfg.model.validate()
    cfg.train.validate()
    try:
        cfg.eval.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path | None = None, overrides: typing.Sequence[str] = ()) -> RunConfig:
    flat: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        flat = flatten(doc)
    for text in overrides:
        key, value = parse_override(text)
        flat[key] = value
    return build(flat)
