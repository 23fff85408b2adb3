"""Run configuration: YAML loading, dotted overrides, strict dataclass binding."""
from __future__ import annotations

import copy
import dataclasses
import types
import typing
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from .kernels import KernelError, kernel_from_config
from .particles import ConfigError, InitLaw

RUN_KEYS = ("experiment", "seed", "output_dir", "threads", "memory_cap_mb", "params")


class ConfigParseError(ValueError):
    """Bad configuration text or value; the message names the offending key or line."""


@dataclasses.dataclass
class RunConfig:
    """Top-level run description: which experiment, where, with which limits."""

    experiment: str
    seed: int = 0
    output_dir: str = "runs/out"
    threads: int = 1
    memory_cap_mb: int = 4096
    params: Any = None

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "seed": self.seed,
                "output_dir": self.output_dir, "threads": self.threads,
                "memory_cap_mb": self.memory_cap_mb, "params": to_plain(self.params)}

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def kernel_field(default: Mapping):
    """Dataclass field holding a kernel config dict, validated on binding."""
    return dataclasses.field(default_factory=lambda: dict(default), metadata={"kind": "kernel"})


def init_field(default: Mapping):
    """Dataclass field holding an initial-law config dict, validated on binding."""
    return dataclasses.field(default_factory=lambda: dict(default), metadata={"kind": "init"})


def to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Mapping):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


# --- parsing -------------------------------------------------------------------------------

def parse_yaml(text: str, source: str = "<config>") -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "unknown line"
        raise ConfigParseError(f"{source}: {where}: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigParseError(f"{source}: top level must be a mapping")
    return data


def load_yaml(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigParseError(f"{p}: cannot read ({exc.strerror})") from None
    return parse_yaml(text, str(p))


def apply_override(data: dict, assignment: str) -> dict:
    """Apply ``dotted.key=value``; keys that are not run-level go under ``params``."""
    if "=" not in assignment:
        raise ConfigParseError(f"override {assignment!r}: expected key=value")
    key, text = assignment.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError:
        raise ConfigParseError(f"override {key}: cannot parse value {text!r}") from None
    parts = key.split(".")
    if parts[0] not in RUN_KEYS:
        parts = ["params"] + parts
    out = copy.deepcopy(data)
    node = out
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigParseError(f"override {key}: {p} is not a mapping")
        node = nxt
    node[parts[-1]] = value
    return out


# --- binding ---------------------------------------------------------------------------------

def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if tp is Any:
        return value
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, path)
            except ConfigParseError as exc:
                errors.append(str(exc))
        raise ConfigParseError(errors[0] if errors else f"{path}: bad value")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, Mapping):
            raise ConfigParseError(f"{path}: expected a mapping")
        return bind(tp, value, path)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigParseError(f"{path}: expected a list")
        inner = args[0] if args else Any
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict or tp is dict:
        if not isinstance(value, Mapping):
            raise ConfigParseError(f"{path}: expected a mapping")
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigParseError(f"{path}: expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigParseError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigParseError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigParseError(f"{path}: expected a string")
        return value
    return value


def _merge_default(f: dataclasses.Field, value: Mapping, tag: str) -> dict:
    """A kernel/init mapping without its tag (``--set kernel.r=...``) extends the default."""
    if tag in value:
        return dict(value)
    return {**f.default_factory(), **value}


def bind(cls, data: Mapping, path: str = "params"):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys by dotted name."""
    if not isinstance(data, Mapping):
        raise ConfigParseError(f"{path}: expected a mapping")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigParseError(f"{path}.{key}: unknown key")
    kwargs = {}
    for name, f in fields.items():
        sub = f"{path}.{name}"
        if name not in data:
            continue
        kind = f.metadata.get("kind")
        value = data[name]
        if kind in ("kernel", "init") and isinstance(value, Mapping):
            value = _merge_default(f, value, "name" if kind == "kernel" else "kind")
        if kind == "kernel":
            if not isinstance(value, Mapping):
                raise ConfigParseError(f"{sub}: expected a mapping")
            try:
                kernel_from_config(value)
            except KernelError as exc:
                raise ConfigParseError(f"{path}.{exc}") from None
            kwargs[name] = dict(value)
        elif kind == "init":
            if not isinstance(value, Mapping):
                raise ConfigParseError(f"{sub}: expected a mapping")
            try:
                InitLaw.from_config(value)
            except ConfigError as exc:
                raise ConfigParseError(f"{sub}: {exc}") from None
            kwargs[name] = dict(value)
        else:
            kwargs[name] = _coerce(value, hints[name], sub)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigParseError(f"{path}: {exc}") from None


def resolve(data: Mapping, params_for: Callable[[str], type]) -> RunConfig:
    """Bind a raw mapping into a :class:`RunConfig` with typed ``params``."""
    for key in data:
        if key not in RUN_KEYS:
            raise ConfigParseError(f"{key}: unknown key")
    if "experiment" not in data:
        raise ConfigParseError("experiment: missing required key")
    name = data["experiment"]
    try:
        pcls = params_for(name)
    except KeyError:
        raise ConfigParseError(f"experiment: unknown experiment {name!r}") from None
    run = RunConfig(
        experiment=name,
        seed=_coerce(data.get("seed", 0), int, "seed"),
        output_dir=_coerce(data.get("output_dir", f"runs/{name}"), str, "output_dir"),
        threads=_coerce(data.get("threads", 1), int, "threads"),
        memory_cap_mb=_coerce(data.get("memory_cap_mb", 4096), int, "memory_cap_mb"),
        params=bind(pcls, data.get("params") or {}, "params"),
    )
    if not 0 <= run.seed < 2**64:
        raise ConfigParseError("seed: must be a 64-bit unsigned integer")
    if run.threads < 1:
        raise ConfigParseError("threads: must be positive")
    if run.memory_cap_mb < 16:
        raise ConfigParseError("memory_cap_mb: must be at least 16")
    return run
