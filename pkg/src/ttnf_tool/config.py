"""Run configuration: JSON schemas, validation, env overrides and interactive selection."""

import dataclasses
import json
import os
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, TypeVar

from InquirerPy import inquirer
from rich.console import Console

from ttnf_tool.errors import ConfigError

console = Console()

ENV_PREFIX = "TTNF_"

T = TypeVar("T")


def _choice(default, *choices: str):
    """Field whose value, or each item of a list value, must be one of ``choices``."""
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata={"choices": choices})
    return field(default=default, metadata={"choices": choices})


@dataclass
class DenoiseSweepConfig:
    modes: list[int] = field(default_factory=lambda: [4] * 10)
    gen_rank: int = 8
    fit_ranks: list[int] = field(default_factory=lambda: [8])
    sigma_gt: float = 1.0
    methods: list[str] = _choice(
        ["tt_svd", "contraction_gd", "sampling_v2", "sampling_v3"],
        "tt_svd", "contraction_gd", "sampling_v2", "sampling_v3",
    )
    families: list[str] = _choice(["normal", "laplace"], "normal", "laplace")
    scales: list[float] = field(default_factory=lambda: [0.0, 0.5])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    steps: int = 1000
    batch: int = 4096
    lr_max: float = 3e-2
    lr_min: float = 3e-4
    warmup_frac: float = 0.05
    init: str = _choice("tt_svd", "tt_svd", "random")
    finetune_lr_max: float = 2e-7
    finetune_lr_min: float = 2e-8
    minibatch: str = _choice("iid", "iid", "epoch")
    loss: str = _choice("auto", "auto", "l1", "l2")
    laplace_scale_is_std: bool = False


@dataclass
class BenchConfig:
    log2_sizes: list[int] = field(default_factory=lambda: [20, 30])
    mode_size: int = 2
    payload: int = 1
    kinds: list[str] = _choice(["v1", "v2", "v3", "dense"], "v1", "v2", "v3", "dense")
    batches: list[int] = field(default_factory=lambda: [4096])
    ranks: Optional[list[int]] = None
    training: bool = True
    measure: bool = True
    measure_max_log2: int = 20
    seed: int = 0


@dataclass
class FitConfig:
    scene: str = ""
    synthetic: str = _choice("sphere", "sphere", "two_boxes", "empty")
    levels: int = 5
    image_size: int = 32
    num_cameras: int = 8
    r_max: int = 16
    init: str = _choice("random", "random", "tt_svd", "tt_svd_trained")
    sigma: float = 0.1
    sampler: str = _choice("v2", "v1", "v2", "v3", "dense")
    seed: int = 0
    samples_per_ray: int = 64
    rays_per_batch: int = 1024
    activation: str = _choice("softplus", "softplus", "relu")
    background: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    steps: int = 2000
    lr_max: float = 3e-3
    lr_min: float = 3e-5
    warmup_frac: float = 0.05
    lr_density_scale: float = 1.0
    lr_sh_scale: float = 1.0
    dense_steps: int = 500
    log_every: int = 100
    jitter: bool = False


@dataclass
class RenderConfigFile:
    checkpoint: str = ""
    scene: str = ""
    samples_per_ray: int = 64
    rays_per_batch: int = 4096
    activation: str = _choice("softplus", "softplus", "relu")
    background: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    sampler: str = _choice("v2", "v1", "v2", "v3", "dense")
    image_format: str = _choice("ppm", "ppm", "png")
    image_size: int = 32
    num_cameras: int = 8


SCHEMAS = {
    "denoise": DenoiseSweepConfig,
    "bench": BenchConfig,
    "fit": FitConfig,
    "render": RenderConfigFile,
}


def _key_line(text: str, key: str) -> Optional[int]:
    """1-based line of the first ``"key":`` in the raw JSON text."""
    match = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    if match is None:
        return None
    return text.count("\n", 0, match.start()) + 1


def _matches(value: Any, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        return any(_matches(value, arg) for arg in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if origin is list:
        (item,) = typing.get_args(hint)
        return isinstance(value, list) and all(_matches(v, item) for v in value)
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, hint)


def _bad_choice(value: Any, choices: Optional[tuple]) -> Optional[Any]:
    """First item of ``value`` outside ``choices``, or ``None``."""
    if choices is None:
        return None
    for item in value if isinstance(value, list) else [value]:
        if item not in choices:
            return item
    return None


def _type_name(hint) -> str:
    return getattr(hint, "__name__", None) or str(hint).replace("typing.", "")


def _env_overrides(schema: type) -> dict:
    overrides = {}
    for f in dataclasses.fields(schema):
        raw = os.environ.get(ENV_PREFIX + f.name.upper())
        if raw is None:
            continue
        try:
            overrides[f.name] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[f.name] = raw
    return overrides


def build_config(schema: type[T], data: dict, text: str = "", env: bool = True) -> T:
    """Validate ``data`` against ``schema``; unknown keys and wrong types are errors."""
    if not isinstance(data, dict):
        raise ConfigError("the configuration must be a JSON object", 1 if text else None)
    hints = typing.get_type_hints(schema)
    for key in data:
        if key not in hints:
            raise ConfigError(f"unknown key '{key}'", _key_line(text, key))
    merged = dict(data)
    sources = {key: "file" for key in data}
    if env:
        for key, value in _env_overrides(schema).items():
            merged[key] = value
            sources[key] = "env"
    choices = {f.name: f.metadata["choices"] for f in dataclasses.fields(schema) if "choices" in f.metadata}
    for key, value in merged.items():
        hint = hints[key]
        if hint is float and isinstance(value, int) and not isinstance(value, bool):
            merged[key] = value = float(value)
        where = f"{ENV_PREFIX}{key.upper()}" if sources[key] == "env" else f"'{key}'"
        line = _key_line(text, key) if sources[key] == "file" else None
        if not _matches(value, hint):
            raise ConfigError(f"{where} must be {_type_name(hint)}, got {value!r}", line)
        bad = _bad_choice(value, choices.get(key))
        if bad is not None:
            raise ConfigError(f"{where} must be one of {', '.join(choices[key])}, got {bad!r}", line)
    return schema(**merged)


def load_config(path: Optional[Path], schema: type[T], env: bool = True) -> T:
    """Read and validate a JSON config file; ``None`` yields the defaults (plus env overrides)."""
    if path is None:
        return build_config(schema, {}, env=env)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno) from exc
    return build_config(schema, data, text, env)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def find_config_files(directory: Path = Path(".")) -> list[Path]:
    return sorted(Path(directory).glob("*.json"))


def select_config(directory: Path = Path(".")) -> Optional[Path]:
    """
    Interactive config selector.

    Lists the JSON files of ``directory``; returns ``None`` when there are none.
    """
    files = find_config_files(directory)
    if not files:
        console.print(f"[yellow]⚠ Nenhum arquivo .json encontrado em {Path(directory).resolve()}[/yellow]")
        return None

    choices = [{"name": f.name, "value": f} for f in files]
    choices.append({"name": "📄  Usar configuração padrão", "value": None})
    return inquirer.select(
        message="📄 Selecione o arquivo de configuração:",
        choices=choices,
        default=choices[0]["value"],
    ).execute()
