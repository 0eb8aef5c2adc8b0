"""
Shared base for JSON-backed configuration models.
"""

import json
import logging
from pathlib import Path

from pydantic import BaseModel, ConfigDict, ValidationError
from typing_extensions import Self

from .errors import ConfigurationError

logger = logging.getLogger(__name__)


class ConfigModel(BaseModel):
    """Frozen pydantic model with canonical JSON round-tripping."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    @classmethod
    def load_json(cls, json_path: Path) -> Self:
        """Load a configuration from a JSON file

        Args:
            json_path: Path to a JSON file holding this configuration

        Returns:
            Validated configuration instance

        Raises:
            FileNotFoundError: If json_path does not exist
            ConfigurationError: If the file is unreadable, not JSON, or fails validation
        """
        try:
            json_str = Path(json_path).read_text()
        except FileNotFoundError as e:
            raise FileNotFoundError(f"Configuration file not found: {json_path}") from e
        except OSError as e:
            raise ConfigurationError(f"Error reading configuration file {json_path}: {e}") from e
        return cls.from_json(json_str)

    @classmethod
    def from_json(cls, spec_str: str) -> Self:
        """Create a configuration from a JSON string

        Raises:
            ConfigurationError: If the string is not a JSON object or fails validation
        """
        try:
            spec = json.loads(spec_str)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Invalid JSON in configuration: {e.msg}") from e

        if not isinstance(spec, dict):
            raise ConfigurationError(
                f"Configuration must be a JSON object, got {type(spec).__name__}"
            )
        return cls.from_dict(spec)

    @classmethod
    def from_dict(cls, spec: dict) -> Self:
        try:
            return cls.model_validate(spec)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid {cls.__name__}: {e}") from e

    def to_json(self) -> str:
        """Canonical JSON: sorted keys, compact separators, byte-stable across runs."""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
