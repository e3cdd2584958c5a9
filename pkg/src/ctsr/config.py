"""Flat `key = value` run configuration files.

One option per line, `#` starts a comment, keys are snake_case.  Parsing
validates everything at once so a bad file reports every problem in a
single pass instead of one error per run.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .model import ModelConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("config errors: " + "; ".join(self.problems))


def parse_config_file(path) -> dict[str, str]:
    text = Path(path).read_text(encoding="utf-8")
    values: dict[str, str] = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {raw!r}")
            continue
        key, val = (part.strip() for part in line.split("=", 1))
        if not key:
            problems.append(f"line {lineno}: empty key")
        elif key in values:
            problems.append(f"line {lineno}: duplicate key {key!r}")
        else:
            values[key] = val
    if problems:
        raise ConfigError(problems)
    return values


def _parse_int(raw: str, key: str, problems: list[str]) -> int:
    try:
        return int(raw)
    except ValueError:
        problems.append(f"{key}: expected an integer, got {raw!r}")
        return 0


def _parse_float(raw: str, key: str, problems: list[str]) -> float:
    try:
        return float(raw)
    except ValueError:
        problems.append(f"{key}: expected a number, got {raw!r}")
        return 0.0


def _parse_ints(raw: str, key: str, problems: list[str]) -> tuple[int, ...]:
    try:
        return tuple(int(v.strip()) for v in raw.split(",") if v.strip())
    except ValueError:
        problems.append(f"{key}: expected comma-separated integers, got {raw!r}")
        return ()


def _parse_filter_configs(raw: str, key: str, problems: list[str]) -> list[tuple[int, ...]]:
    configs = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if chunk:
            configs.append(_parse_ints(chunk, key, problems))
    return configs


_MODEL_DEFAULTS = {
    "feature_depth": "5",
    "conv_layers": "3",
    "filters": "64,64,32,32,1",
    "kernel": "3",
    "scale": "3",
    "lr": "1e-3",
    "seed": "0",
    "epochs": "30",
    "batch_size": "16",
    "patch_hw": "32",
}

_GRID_DEFAULTS = {
    "grid_feature_depths": "",
    "grid_conv_layers": "",
    "grid_filter_configs": "",
    "grid_kernels": "",
    "grid_epochs": "0",
}


@dataclass
class RunConfig:
    data_dir: str
    out_dir: str
    model: ModelConfig
    val_pair_cap: int = 0
    # grid-search candidates; empty lists fall back to the base model value
    grid_feature_depths: list[int] = None
    grid_conv_layers: list[int] = None
    grid_filter_configs: list[tuple[int, ...]] = None
    grid_kernels: list[int] = None
    grid_epochs: int = 0


def load_run_config(path, *, grid: bool = False) -> RunConfig:
    """Validate a train/gridsearch config file; raises ConfigError listing
    every unknown key, missing key, bad value, and model-invariant violation."""
    values = parse_config_file(path)
    problems: list[str] = []
    known = {"data_dir", "out_dir", "val_pair_cap"} | set(_MODEL_DEFAULTS)
    if grid:
        known |= set(_GRID_DEFAULTS)
    for key in sorted(values):
        if key not in known:
            problems.append(f"unknown key {key!r}")
    for req in ("data_dir", "out_dir"):
        if not values.get(req):
            problems.append(f"missing required key {req!r}")

    def get(key: str) -> str:
        default = _MODEL_DEFAULTS.get(key, _GRID_DEFAULTS.get(key, ""))
        return values.get(key, default)

    value_problems: list[str] = []
    model = ModelConfig(
        feature_depth=_parse_int(get("feature_depth"), "feature_depth", value_problems),
        conv_layers=_parse_int(get("conv_layers"), "conv_layers", value_problems),
        filters=_parse_ints(get("filters"), "filters", value_problems) or (1,),
        kernel=_parse_int(get("kernel"), "kernel", value_problems),
        scale=_parse_int(get("scale"), "scale", value_problems),
        lr=_parse_float(get("lr"), "lr", value_problems),
        seed=_parse_int(get("seed"), "seed", value_problems),
        epochs=_parse_int(get("epochs"), "epochs", value_problems),
        batch_size=_parse_int(get("batch_size"), "batch_size", value_problems),
        patch_hw=_parse_int(get("patch_hw"), "patch_hw", value_problems),
    )
    problems.extend(value_problems)
    if not value_problems:
        # values parsed; report every model-invariant violation too
        problems.extend(model.problems())
    val_cap = _parse_int(values.get("val_pair_cap", "0"), "val_pair_cap", problems)
    if val_cap < 0:
        problems.append(f"val_pair_cap: must be >= 0, got {val_cap}")
    cfg = RunConfig(
        data_dir=values.get("data_dir", ""),
        out_dir=values.get("out_dir", ""),
        model=model,
        val_pair_cap=val_cap,
    )
    if grid:
        cfg.grid_feature_depths = list(
            _parse_ints(get("grid_feature_depths"), "grid_feature_depths", problems)
        ) or [model.feature_depth]
        cfg.grid_conv_layers = list(
            _parse_ints(get("grid_conv_layers"), "grid_conv_layers", problems)
        ) or [model.conv_layers]
        cfg.grid_filter_configs = _parse_filter_configs(
            get("grid_filter_configs"), "grid_filter_configs", problems
        ) or [model.filters]
        cfg.grid_kernels = list(
            _parse_ints(get("grid_kernels"), "grid_kernels", problems)
        ) or [model.kernel]
        cfg.grid_epochs = _parse_int(get("grid_epochs"), "grid_epochs", problems)
    if problems:
        raise ConfigError(problems)
    return cfg
