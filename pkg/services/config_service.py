import difflib
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

from pydantic import BaseModel, ValidationError

from core.errors import DataIOError, UsageError
from schemas.config_schema import ExperimentConfig

logger = logging.getLogger(__name__)

_NONE_WORDS = {"", "none", "null"}


def _sections() -> Dict[str, type]:
    return {name: info.annotation for name, info in ExperimentConfig.model_fields.items()}


def valid_keys() -> List[str]:
    """Every dotted key, e.g. ``loss.beta_cg``, in declaration order."""
    return [f"{section}.{field}" for section, model in _sections().items() for field in model.model_fields]


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ConfigService:
    @staticmethod
    def check_key(key: str) -> None:
        keys = valid_keys()
        if key not in keys:
            suggestions = difflib.get_close_matches(key, keys, n=3, cutoff=0.5)
            hint = f"; did you mean {', '.join(suggestions)}?" if suggestions else ""
            raise UsageError(f"unknown config key {key!r}{hint}")

    @staticmethod
    def parse_text(text: str, source: str = "<config>") -> Dict[str, str]:
        """``key = value`` lines; ``#`` starts a comment."""
        values: Dict[str, str] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{source}:{number}: expected 'key = value', got {raw.strip()!r}")
            key = key.strip()
            ConfigService.check_key(key)
            values[key] = value.strip()
        return values

    @staticmethod
    def parse_file(path: Union[str, Path]) -> Dict[str, str]:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise DataIOError(f"cannot read config {path}: {e}") from e
        return ConfigService.parse_text(text, str(path))

    @staticmethod
    def parse_overrides(overrides: Iterable[str]) -> Dict[str, str]:
        values: Dict[str, str] = {}
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise UsageError(f"override {item!r} is not of the form key=value")
            ConfigService.check_key(key.strip())
            values[key.strip()] = value.strip()
        return values

    @staticmethod
    def build(values: Dict[str, str], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
        """Apply dotted string values on top of ``base`` (defaults when omitted)."""
        nested = (base or ExperimentConfig()).model_dump()
        for key, value in values.items():
            ConfigService.check_key(key)
            section, field = key.split(".", 1)
            nested[section][field] = None if value.strip().lower() in _NONE_WORDS else value
        try:
            return ExperimentConfig.model_validate(nested)
        except ValidationError as e:
            problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
            raise UsageError(f"invalid configuration: {problems}") from None

    @staticmethod
    def load(path: Union[str, Path, None] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
        """Defaults, then the file, then overrides."""
        values = ConfigService.parse_file(path) if path is not None else {}
        values.update(ConfigService.parse_overrides(overrides))
        return ConfigService.build(values)

    @staticmethod
    def updated(config: ExperimentConfig, **sections: Dict[str, object]) -> ExperimentConfig:
        """Copy of ``config`` with validated section updates, e.g. ``updated(c, train={"seed": 3})``."""
        nested = config.model_dump()
        for section, fields in sections.items():
            nested[section].update(fields)
        try:
            return ExperimentConfig.model_validate(nested)
        except ValidationError as e:
            raise UsageError(f"invalid configuration: {e.errors()[0]['msg']}") from None

    @staticmethod
    def dump(config: ExperimentConfig) -> str:
        lines = ["# effective configuration: every key, defaults included"]
        for section in _sections():
            model: BaseModel = getattr(config, section)
            for field in type(model).model_fields:
                lines.append(f"{section}.{field} = {_format_value(getattr(model, field))}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def write(config: ExperimentConfig, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(ConfigService.dump(config), encoding="utf-8")
        except OSError as e:
            raise DataIOError(f"cannot write {path}: {e.strerror or e}") from e
        return path
