"""Plain-text ``section.key = value`` run configuration with flag overrides."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .trainer import PROFILES, TrainConfig

SECTIONS = ("model", "train", "data")
# keys that accumulate across repeated entries instead of overriding
LIST_KEYS = {"data.hr_dir"}
# patch size and augmentation belong to the data section and are copied into TrainConfig
TRAIN_FROM_DATA = ("patch_hr", "augment")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source is not None and line is not None:
            where = f"{source}:{line}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class DataConfig:
    hr_dir: tuple = ()
    lr_dir: str | None = None
    patch_hr: int = 192
    augment: bool = True
    cache_lr: bool = False
    eval_dir: str | None = None
    synthetic_count: int = 0
    synthetic_size: int = 96
    synthetic_eval_count: int = 4
    synthetic_eval_size: int = 64


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def dataset_spec(self):
        from .data import DatasetSpec

        return DatasetSpec(
            hr_dir=list(self.data.hr_dir), lr_dir=self.data.lr_dir, scale=self.model.scale,
            patch_hr=self.data.patch_hr, augment=self.data.augment, cache_lr=self.data.cache_lr,
        )

    def to_text(self) -> str:
        """Fully resolved config in the same format :func:`parse_config` reads."""
        lines = []
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                if section == "train" and f.name in TRAIN_FROM_DATA:
                    continue
                value = getattr(obj, f.name)
                if f"{section}.{f.name}" in LIST_KEYS:
                    lines += [f"{section}.{f.name} = {v}" for v in value]
                    continue
                lines.append(f"{section}.{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "resolved_config.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path


_SECTION_TYPES = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _field_types(section: str) -> dict:
    hints = typing.get_type_hints(_SECTION_TYPES[section])
    names = {f.name for f in dataclasses.fields(_SECTION_TYPES[section])}
    if section == "train":
        names -= set(TRAIN_FROM_DATA)
    return {n: hints[n] for n in names}


def _convert(raw: str, tp, key: str):
    args = typing.get_args(tp)
    if type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        tp = next(a for a in args if a is not type(None))
    if tp is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if tp is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if tp is float:
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
    if tp is tuple or typing.get_origin(tp) is tuple:
        items = [s.strip() for s in raw.split(",") if s.strip()]
        try:
            return tuple(int(s) for s in items)
        except ValueError:
            return tuple(items)
    return raw


def _split_key(key: str, line: int | None, source: str | None):
    section, _, name = key.partition(".")
    if section not in SECTIONS or not name:
        raise ConfigError(f"unknown key {key!r} (expected model.*, train.* or data.*)", line, source)
    types = _field_types(section)
    if name not in types:
        raise ConfigError(f"unknown key {key!r}; valid {section} keys: {', '.join(sorted(types))}", line, source)
    return section, name, types[name]


class _Builder:
    def __init__(self, base: RunConfig):
        self.values = {s: {} for s in SECTIONS}
        self.base = base
        self.lists: dict[str, list] = {}

    def set(self, key: str, raw: str, line: int | None = None, source: str | None = None, list_reset: bool = False):
        section, name, tp = _split_key(key, line, source)
        try:
            if key in LIST_KEYS:
                lst = self.lists.setdefault(key, [])
                if list_reset:
                    lst.clear()
                lst.append(raw)
                return
            self.values[section][name] = _convert(raw, tp, key)
        except ValueError as exc:
            raise ConfigError(str(exc), line, source) from None

    def build(self) -> RunConfig:
        parts = {}
        for section in SECTIONS:
            changes = dict(self.values[section])
            for key, lst in self.lists.items():
                s, _, name = key.partition(".")
                if s == section:
                    changes[name] = tuple(lst)
            try:
                parts[section] = dataclasses.replace(getattr(self.base, section), **changes)
            except (ValueError, TypeError) as exc:
                raise ConfigError(str(exc)) from None
        data = parts["data"]
        try:
            train = parts["train"].replace(**{k: getattr(data, k) for k in TRAIN_FROM_DATA})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if data.patch_hr % parts["model"].scale:
            raise ConfigError(f"data.patch_hr {data.patch_hr} not divisible by model.scale {parts['model'].scale}")
        return RunConfig(parts["model"], train, data)


def profile_config(name: str | None) -> RunConfig:
    if name is None:
        return RunConfig()
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")
    model, train = PROFILES[name]
    data = DataConfig(patch_hr=train.patch_hr, augment=train.augment)
    if name == "desk-smoke":
        data = dataclasses.replace(data, synthetic_count=32)
    return RunConfig(model, train, data)


def parse_lines(text: str, builder: _Builder, source: str | None = None) -> None:
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw_line.strip()!r}", lineno, source)
        key, _, value = line.partition("=")
        builder.set(key.strip(), value.strip(), lineno, source)


def parse_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    """``--section.key=value`` / ``--section.key value`` tokens -> (key, value) pairs."""
    pairs = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok} is missing a value")
            key, value = body, tokens[i + 1]
            i += 1
        pairs.append((key, value))
        i += 1
    return pairs


def load_run_config(path=None, overrides=(), profile: str | None = None) -> RunConfig:
    """Profile defaults, then the config file, then ``--section.key=value`` overrides.

    Repeated ``data.hr_dir`` entries in the file accumulate in order; an
    ``data.hr_dir`` override on the command line replaces the file's list.
    """
    builder = _Builder(profile_config(profile))
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        parse_lines(text, builder, str(path))
    seen_list_override = set()
    for key, value in overrides:
        reset = key in LIST_KEYS and key not in seen_list_override
        seen_list_override.add(key)
        builder.set(key, value, list_reset=reset)
    return builder.build()
