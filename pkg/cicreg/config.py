"""
Flat ``key = value`` configuration for registration runs.

Keys are the field names of RegistrationConfig, LossWeights and SsimParams. Values are
strings coerced by the pydantic models; list fields are comma-separated.
Precedence: model defaults < config file < ``--set`` overrides < dedicated CLI flags.
"""

import difflib
import logging
import os
import pathlib
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from pydantic import ValidationError

from cicreg.errors import ConfigError
from cicreg.losses import LossWeights, SsimParams
from cicreg.optimizer import RegistrationConfig, max_levels

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

WEIGHT_KEYS = tuple(LossWeights.model_fields)
SSIM_KEYS = tuple(SsimParams.model_fields)
SCHEDULE_KEYS = tuple(k for k in RegistrationConfig.model_fields if k not in ("weights", "ssim"))
VALID_KEYS = SCHEDULE_KEYS + WEIGHT_KEYS + SSIM_KEYS
LIST_KEYS = ("iters_per_level", "scale_weights")
OPTIONAL_KEYS = ("num_scales", "scale_weights")
AUTO_WORDS = ("auto", "none", "null", "")


def suggest_correction(value: str, valid_values: Sequence[str]) -> str:
    """
    Suggest the closest valid value using difflib.get_close_matches.
    """
    matches = difflib.get_close_matches(value, list(valid_values), n=1)
    if matches:
        return f"Did you mean '{matches[0]}'?"
    return ""


def _split_pair(text: str, where: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"{where}: expected 'key = value', got {text.strip()!r}")
    return key, value.strip()


def read_config_file(path: PathLike) -> dict[str, str]:
    """
    Read a flat config file. ``#`` starts a comment; blank lines are ignored; later keys win.

    Raises:
        ConfigError: If a line is not of the form ``key = value``.
        OSError: If the file cannot be read.
    """
    values: dict[str, str] = {}
    text = pathlib.Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = _split_pair(line, f"{path!s}:{lineno}")
        values[key] = value
    return values


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    """
    Parse repeated ``--set key=value`` arguments.

    Raises:
        ConfigError: If an item lacks '=' or a key.
    """
    values: dict[str, str] = {}
    for item in items:
        key, value = _split_pair(item, "--set")
        values[key] = value
    return values


def default_iters(levels: int) -> list[int]:
    """The default schedule for ``levels`` levels, keeping the finest entries."""
    full = [100] * max(0, levels - 3) + [100, 100, 50]
    return full[-levels:]


def _coerce(key: str, value: str) -> Any:
    if key in OPTIONAL_KEYS and value.lower() in AUTO_WORDS:
        return None
    if key in LIST_KEYS:
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _validation_message(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item.get("loc", ()))
        parts.append(f"{location}: {item['msg']}" if location else item["msg"])
    return "; ".join(parts)


def build_config(values: Mapping[str, str]) -> RegistrationConfig:
    """
    Build a validated RegistrationConfig from string values.

    Raises:
        ConfigError: On an unknown key (with a suggestion) or a value the models reject.
    """
    schedule: dict[str, Any] = {}
    weights: dict[str, Any] = {}
    ssim: dict[str, Any] = {}
    for key, value in values.items():
        if key in SCHEDULE_KEYS:
            schedule[key] = _coerce(key, value)
        elif key in WEIGHT_KEYS:
            weights[key] = _coerce(key, value)
        elif key in SSIM_KEYS:
            ssim[key] = _coerce(key, value)
        else:
            suggestion = suggest_correction(key, VALID_KEYS)
            raise ConfigError(f"Unknown config key: '{key}'. {suggestion}".strip())

    if "levels" in schedule and "iters_per_level" not in schedule:
        try:
            schedule["iters_per_level"] = default_iters(int(schedule["levels"]))
        except ValueError as e:
            raise ConfigError(f"levels: expected an integer, got {schedule['levels']!r}") from e
    try:
        return RegistrationConfig(**schedule, weights=LossWeights(**weights), ssim=SsimParams(**ssim))
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {_validation_message(e)}") from e


def _format(value: Any) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_values(cfg: RegistrationConfig) -> dict[str, str]:
    """Flatten a config back into the string form :func:`build_config` accepts."""
    values = {key: _format(getattr(cfg, key)) for key in SCHEDULE_KEYS}
    values.update({key: _format(getattr(cfg.weights, key)) for key in WEIGHT_KEYS})
    values.update({key: _format(getattr(cfg.ssim, key)) for key in SSIM_KEYS})
    return values


def load_config(
    config_path: Optional[PathLike] = None, overrides: Iterable[str] = (), **flags: Any
) -> RegistrationConfig:
    """
    Apply the precedence chain: defaults, then the file, then ``--set`` items, then flags.

    Flags whose value is None are ignored.
    """
    values: dict[str, str] = {}
    if config_path is not None:
        values.update(read_config_file(config_path))
    values.update(parse_overrides(overrides))
    values.update({key: _format(value) for key, value in flags.items() if value is not None})
    return build_config(values)


def fit_levels(cfg: RegistrationConfig, dims: Sequence[int]) -> RegistrationConfig:
    """
    Lower ``levels`` to what ``dims`` can support, keeping the finest ``iters_per_level`` entries.

    Returns ``cfg`` unchanged when it already fits or when no level fits at all.
    """
    feasible = max_levels(dims, 2 * cfg.ssim.window_radius + 1)
    if feasible == 0 or cfg.levels <= feasible:
        return cfg
    logger.warning(
        "Dims %s support only %d pyramid level(s); lowering levels from %d", tuple(dims), feasible, cfg.levels
    )
    data = cfg.model_dump()
    data["levels"] = feasible
    data["iters_per_level"] = list(cfg.iters_per_level[-feasible:])
    return RegistrationConfig.model_validate(data)
