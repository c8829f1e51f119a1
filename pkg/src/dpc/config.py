"""Flat run configuration: TOML file + ``key=value`` overrides + stable digest."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

from .graph import ContractViolation

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

DEFAULT_TEMPLATES = (
    "a photo seems to express a feeling of [label word]",
    "an image to express a feeling like [label word]",
    "a picture seems to express some feelings like [label word]",
)

REQUIRED = ("lr0", "manifest")
# Locators: where things live, not what the run computes.  File contents
# behind vocab / encoder_archive / manifest are hashed into the digest instead.
_NOT_DIGESTED = ("out_dir", "vocab", "encoder_archive", "manifest")


class ConfigError(ContractViolation):
    pass


@dataclass(frozen=True)
class RunConfig:
    lr0: float
    manifest: str
    # prompts and scoring
    template: str = DEFAULT_TEMPLATES[0]
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    instance_specific: bool = True
    class_specific: bool = True
    normalize_weights: bool = False
    logit_scale: float = 1.0
    # optimisation
    momentum: float = 0.9
    lr_step: int = 3
    lr_gamma: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    # seeds
    seed_weights: int = 0
    seed_data: int = 0
    seed_shuffle: int = 0
    # encoders
    dim: int = 32
    layers: int = 2
    image_size: int = 32
    patch_size: int = 8
    image_width: int = 32
    context_length: int = 16
    preprocess: str = "tiny"
    # data
    synthetic_classes: int = 3
    synthetic_per_class: int = 60
    train_fraction: float = 0.8
    # paths
    vocab: str = ""
    encoder_archive: str = ""
    out_dir: str = "runs"
    base_dir: str = field(default=".", compare=False)

    def resolve(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def is_synthetic(self) -> bool:
        return self.manifest == "synthetic"

    def canonical(self) -> dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in _NOT_DIGESTED and f.name != "base_dir"}
        data["templates"] = list(self.templates)
        for key in ("vocab", "encoder_archive"):
            value = getattr(self, key)
            data[f"{key}_sha256"] = _file_sha256(self.resolve(value)) if value else ""
        data["manifest_sha256"] = "synthetic" if self.is_synthetic else _file_sha256(self.resolve(self.manifest))
        return data

    def digest(self) -> bytes:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).digest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _file_sha256(path: Path) -> str:
    try:
        return hashlib.sha256(path.read_bytes()).hexdigest()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


_TYPES = {f.name: f.type for f in fields(RunConfig) if f.name != "base_dir"}


def _check_type(key: str, value: Any) -> tuple[Any, str | None]:
    kind = _TYPES[key]
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return value, f"{key}: expected a number, got {value!r}"
        return float(value), None
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            return value, f"{key}: expected an integer, got {value!r}"
        return value, None
    if kind == "bool":
        if not isinstance(value, bool):
            return value, f"{key}: expected true/false, got {value!r}"
        return value, None
    if kind == "str":
        if not isinstance(value, str):
            return value, f"{key}: expected a string, got {value!r}"
        return value, None
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        return value, f"{key}: expected a list of strings, got {value!r}"
    return tuple(value), None


def _range_problems(c: dict[str, Any]) -> list[str]:
    p = []

    def need(cond, msg):
        if not cond:
            p.append(msg)

    need(c["lr0"] > 0, f"lr0: must be > 0, got {c['lr0']}")
    need(0 <= c["momentum"] < 1, f"momentum: must be in [0, 1), got {c['momentum']}")
    need(0 < c["lr_gamma"] <= 1, f"lr_gamma: must be in (0, 1], got {c['lr_gamma']}")
    need(c["logit_scale"] > 0, f"logit_scale: must be > 0, got {c['logit_scale']}")
    need(0 < c["train_fraction"] < 1, f"train_fraction: must be in (0, 1), got {c['train_fraction']}")
    for key in ("lr_step", "batch_size", "epochs", "dim", "layers", "image_size", "patch_size",
                "image_width", "context_length", "synthetic_per_class"):
        need(c[key] >= 1, f"{key}: must be >= 1, got {c[key]}")
    need(c["synthetic_classes"] >= 2, f"synthetic_classes: must be >= 2, got {c['synthetic_classes']}")
    need(c["image_size"] % c["patch_size"] == 0,
         f"patch_size: {c['patch_size']} does not divide image_size {c['image_size']}")
    for key in ("seed_weights", "seed_data", "seed_shuffle"):
        need(c[key] >= 0, f"{key}: must be >= 0, got {c[key]}")
    need(len(c["templates"]) >= 1, "templates: must list at least one template")
    return p


def _parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare strings need no quoting on the command line
    return key, value


def build_config(values: dict[str, Any], base_dir: str | Path = ".") -> RunConfig:
    """Validate a flat mapping; every problem is reported in one error."""
    problems = []
    unknown = sorted(k for k in values if k not in _TYPES)
    if unknown:
        problems.append(f"unknown keys: {unknown}")
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        problems.append(f"missing required keys: {missing}")
    clean: dict[str, Any] = {}
    for key, value in values.items():
        if key in _TYPES:
            value, err = _check_type(key, value)
            if err:
                problems.append(err)
            clean[key] = value
    if not problems:
        defaults = {f.name: f.default for f in fields(RunConfig)
                    if f.default is not dataclasses.MISSING and f.name != "base_dir"}
        problems += _range_problems({**defaults, **clean})
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    return RunConfig(**clean, base_dir=str(base_dir))


def parse_config(file: str | Path | None, overrides: Sequence[str] = ()) -> RunConfig:
    values: dict[str, Any] = {}
    base = Path(".")
    if file is not None:
        path = Path(file)
        try:
            values = tomllib.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
        nested = [k for k, v in values.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"config must be flat; tables not allowed: {nested}")
        base = path.parent
    for item in overrides:
        key, value = _parse_override(item)
        values[key] = value
    return build_config(values, base)
