"""
Flat `key=value` configuration files mapped onto (possibly nested) frozen dataclasses.

Nested dataclass fields are addressed with a dotted prefix, e.g. `plan.horizon=5`.
"""

import dataclasses
import enum
import logging
import typing
from pathlib import Path

_logger = logging.getLogger(__package__)

_TRUE_VALUES = frozenset({"1", "true", "yes", "on"})
_FALSE_VALUES = frozenset({"0", "false", "no", "off"})
_NONE_VALUES = frozenset({"", "none", "null"})

ConfigT = typing.TypeVar("ConfigT")


class ConfigError(ValueError):
    """Custom exception raised when a configuration entry cannot be parsed"""


class UnknownConfigKeyError(ConfigError):
    """Custom exception raised when a configuration key doesn't match any field"""


def parse_config_text(text: str, source: str = "<string>") -> typing.Dict[str, str]:
    """
    Parse flat `key=value` lines. Blank lines and `#` comments are ignored, later keys win.

    :raises ConfigError: on a line which isn't a `key=value` pair
    """
    entries: typing.Dict[str, str] = {}
    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue

        key, separator, value = line.partition("=")
        if not separator or not key.strip():
            raise ConfigError(f"{source}:{line_number}: expected `key=value`, got {raw_line!r}")
        entries[key.strip()] = value.strip()

    return entries


def load_config_file(path: typing.Union[str, Path]) -> typing.Dict[str, str]:
    path = Path(path)
    _logger.debug("loading configuration from %s", path)
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def _convert(raw_value: str, annotation: typing.Any, key: str) -> typing.Any:
    # pylint: disable=too-many-return-statements
    origin = typing.get_origin(annotation)
    arguments = typing.get_args(annotation)

    if origin is typing.Union:
        if raw_value.lower() in _NONE_VALUES and type(None) in arguments:
            return None
        (inner,) = (argument for argument in arguments if argument is not type(None))
        return _convert(raw_value, inner, key)

    if origin is tuple:
        items = [item.strip() for item in raw_value.split(",") if item.strip()]
        return tuple(_convert(item, arguments[0], key) for item in items)

    try:
        if annotation is bool:
            lowered = raw_value.lower()
            if lowered in _TRUE_VALUES:
                return True
            if lowered in _FALSE_VALUES:
                return False
            raise ValueError(raw_value)
        if isinstance(annotation, type) and issubclass(annotation, enum.Enum):
            return annotation(raw_value.lower())
        if annotation in (int, float, str):
            return annotation(raw_value)
    except ValueError as exception:
        raise ConfigError(f"invalid value for {key} : {raw_value!r}") from exception

    raise ConfigError(f"unsupported type for {key} : {annotation}")


def apply_overrides(
    config: ConfigT, overrides: typing.Mapping[str, str], prefix: str = ""
) -> ConfigT:
    """
    Return a copy of `config` with `overrides` (raw strings, dotted keys) applied.

    :raises UnknownConfigKeyError: when a key doesn't name any (nested) field
    :raises ConfigError: when a value cannot be converted to its field type
    """
    assert dataclasses.is_dataclass(config) and not isinstance(config, type)

    type_hints = typing.get_type_hints(type(config))
    field_names = {field.name for field in dataclasses.fields(config)}

    changes: typing.Dict[str, typing.Any] = {}
    nested: typing.Dict[str, typing.Dict[str, str]] = {}
    for key, raw_value in overrides.items():
        name, _, rest = key.partition(".")
        if name not in field_names:
            raise UnknownConfigKeyError(f"unknown configuration key : {prefix}{key}")

        value = getattr(config, name)
        if dataclasses.is_dataclass(value):
            if not rest:
                raise UnknownConfigKeyError(
                    f"{prefix}{key} is a section, please set one of its fields"
                )
            nested.setdefault(name, {})[rest] = raw_value
        elif rest:
            raise UnknownConfigKeyError(f"unknown configuration key : {prefix}{key}")
        else:
            changes[name] = _convert(raw_value, type_hints[name], f"{prefix}{key}")

    for name, section_overrides in nested.items():
        changes[name] = apply_overrides(
            getattr(config, name), section_overrides, f"{prefix}{name}."
        )

    try:
        return dataclasses.replace(config, **changes)  # type: ignore[type-var]
    except ValueError as exception:
        raise ConfigError(str(exception)) from exception


def flatten_config(config: typing.Any, prefix: str = "") -> typing.Dict[str, typing.Any]:
    """Dotted-key view of a (nested) dataclass configuration, values kept as is"""
    flat: typing.Dict[str, typing.Any] = {}
    for field in dataclasses.fields(config):
        value = getattr(config, field.name)
        if dataclasses.is_dataclass(value):
            flat.update(flatten_config(value, f"{prefix}{field.name}."))
        else:
            flat[f"{prefix}{field.name}"] = value
    return flat


def _format_value(value: typing.Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, tuple):
        return ",".join(_format_value(item) for item in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(config: typing.Any) -> str:
    """Serialize to the `key=value` format `parse_config_text` reads back"""
    return "".join(
        f"{key}={_format_value(value)}\n" for key, value in flatten_config(config).items()
    )


def config_echo(config: typing.Any) -> typing.Dict[str, str]:
    """String form of every entry, as stored in checkpoint headers"""
    return {key: _format_value(value) for key, value in flatten_config(config).items()}
