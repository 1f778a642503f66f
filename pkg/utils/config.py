"""
Run configuration files

Flat `key = value` lines in dotenv syntax, tokenized by python-dotenv's
parser. `#` starts a comment and `include <path>` pulls in another file
relative to the including one; later keys override earlier ones.
Values are coerced by the target dataclass field types.
"""
import dataclasses
import logging
import typing
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Set, Tuple, Type, TypeVar, Union

from dotenv.parser import parse_stream

from utils.errors import ConfigError

logger = logging.getLogger(__name__)

T = TypeVar('T')

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}
_NONE = {'', 'none', 'null'}


def _line_number(original) -> int:
    # parse_stream marks a binding before its leading blank lines
    text = original.string
    return original.line + text[:len(text) - len(text.lstrip())].count('\n')


def read_config(path: Union[str, Path], _stack: Optional[Tuple[Path, ...]] = None) -> Dict[str, str]:
    path = Path(path).resolve()
    stack = _stack or ()
    if path in stack:
        chain = ' -> '.join(p.name for p in stack + (path,))
        raise ConfigError(f"Include cycle: {chain}")
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")

    values: Dict[str, str] = {}
    with path.open() as stream:
        for binding in parse_stream(stream):
            if not binding.error and binding.key is None:
                continue
            if not binding.error and binding.value is not None:
                values[binding.key] = binding.value
                continue
            text = binding.original.string.split('#', 1)[0].strip()
            words = text.split(None, 1)
            if len(words) == 2 and words[0] == 'include':
                values.update(read_config(path.parent / words[1].strip(), stack + (path,)))
                continue
            number = _line_number(binding.original)
            raise ConfigError(f"{path.name}:{number}: expected 'key = value', got {binding.original.string.strip()!r}")
    return values


def coerce(value: str, annotation: Any) -> Any:
    """Convert a config string to the given type annotation"""
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)

    if origin is Union:
        inner = [arg for arg in args if arg is not type(None)]
        if type(None) in args and value.strip().lower() in _NONE:
            return None
        return coerce(value, inner[0])
    if origin in (tuple, Tuple):
        item_type = args[0] if args else str
        return tuple(coerce(item.strip(), item_type) for item in value.split(',') if item.strip())
    if annotation is bool:
        lowered = value.strip().lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ConfigError(f"Expected a boolean, got {value!r}")
    if annotation in (int, float, str):
        try:
            return annotation(value)
        except ValueError as e:
            raise ConfigError(f"Expected {annotation.__name__}, got {value!r}") from e
    return value


def field_types(cls: Type) -> Dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.init}


def build_config(cls: Type[T], values: Dict[str, str], require_seed: bool = True,
                 overrides: Optional[Dict[str, Any]] = None) -> T:
    """Instantiate a config dataclass from raw string values; unknown keys are an error"""
    types = field_types(cls)
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {key: coerce(value, types[key]) for key, value in values.items()}
    kwargs.update(overrides or {})
    if require_seed and 'seed' in types and kwargs.get('seed') is None:
        raise ConfigError(f"{cls.__name__} requires an explicit seed")
    return cls(**kwargs)


def split_values(values: Dict[str, str], classes: Iterable[Type]) -> List[Dict[str, str]]:
    """Distribute flat keys over several dataclasses by field name"""
    classes = list(classes)
    parts: List[Dict[str, str]] = [{} for _ in classes]
    claimed: Set[str] = set()
    for index, cls in enumerate(classes):
        names = set(field_types(cls))
        for key, value in values.items():
            if key in names:
                parts[index][key] = value
                claimed.add(key)
    unknown = sorted(set(values) - claimed)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    return parts


def sections(values: Dict[str, str], names: Iterable[str]) -> Tuple[Dict[str, str], Dict[str, Dict[str, str]]]:
    """Split `section.key` entries from top-level keys"""
    names = set(names)
    top: Dict[str, str] = {}
    nested: Dict[str, Dict[str, str]] = {name: {} for name in names}
    for key, value in values.items():
        if '.' in key:
            section, sub = key.split('.', 1)
            if section not in names:
                raise ConfigError(f"Unknown config section '{section}' in key '{key}'")
            nested[section][sub] = value
        else:
            top[key] = value
    return top, nested
