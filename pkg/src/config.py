"""
Configuration loading for the Financial QA Agent Framework.
Reads backend profiles, the embedding endpoint and run defaults from a TOML or
JSON file. Secrets are only ever read from environment variables; main.py
loads a `.env` file into the environment through python-dotenv.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

try:
    import tomllib
except ImportError:  # pragma: no cover - Python < 3.11
    tomllib = None

from llm_gateway import BackendProfile

logger = logging.getLogger(__name__)

SECRET_KEYS = {'api_key', 'apikey', 'key', 'token', 'secret', 'password'}
DEFAULT_EMBEDDING_MODEL = "all-MiniLM-L6-v2"


class ConfigError(Exception):
    """Raised for unreadable or invalid configuration."""


@dataclass
class EmbeddingSettings:
    endpoint: Optional[str] = None
    model: str = DEFAULT_EMBEDDING_MODEL
    auth_env_var: Optional[str] = None
    batch_size: int = 64


@dataclass
class RetrievalSettings:
    k: int = 3
    chunk_size_words: int = 400
    overlap_words: int = 50


@dataclass
class EvalSettings:
    concurrency: int = 4
    seed: int = 0
    max_retries: int = 3


@dataclass
class AppConfig:
    """Resolved configuration: built-in defaults overlaid with the config file."""
    backends: Dict[str, BackendProfile] = field(default_factory=dict)
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    source: Optional[str] = None

    def backend(self, name: str) -> BackendProfile:
        """
        Look up a backend profile by name.

        Args:
            name: Profile name from the config file, or "scripted"

        Returns:
            The BackendProfile

        Raises:
            ConfigError: If no profile has that name
        """
        if name in self.backends:
            return self.backends[name]
        if name == 'scripted':
            return BackendProfile(name='scripted', endpoint='scripted://local', model='scripted')
        known = ', '.join(sorted(self.backends)) or 'none'
        raise ConfigError(f"Unknown backend '{name}' (configured: {known}; built-in: scripted)")


def _read_file(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        if path.endswith('.toml'):
            if tomllib is None:
                raise ConfigError("TOML config requires Python 3.11+; use a .json config instead")
            with open(path, 'rb') as f:
                return tomllib.load(f)
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (ValueError, OSError) as e:
        raise ConfigError(f"Could not parse config file {path}: {e}") from e


def _reject_secrets(section: str, values: Dict[str, Any]):
    leaked = [k for k in values if k.lower() in SECRET_KEYS]
    if leaked:
        raise ConfigError(
            f"[{section}] contains secret-like keys {leaked}; put the key in an environment "
            f"variable and reference it with auth_env_var"
        )


def _build_backend(name: str, values: Dict[str, Any]) -> BackendProfile:
    _reject_secrets(f"backends.{name}", values)
    allowed = {
        'endpoint', 'model', 'auth_env_var', 'supports_system_prompt', 'requests_per_minute',
        'timeout_s', 'price_per_1k_prompt', 'price_per_1k_completion',
    }
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"[backends.{name}] has unknown keys: {sorted(unknown)}")
    for required in ('endpoint', 'model'):
        if required not in values:
            raise ConfigError(f"[backends.{name}] is missing '{required}'")
    try:
        return BackendProfile(name=name, **values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[backends.{name}] is invalid: {e}") from e


def load_config(path: Optional[str] = None) -> AppConfig:
    """
    Load configuration from a TOML or JSON file.

    Args:
        path: Config file path; None returns built-in defaults

    Returns:
        AppConfig instance
    """
    config = AppConfig()
    if path is None:
        return config

    raw = _read_file(path)
    config.source = path

    for name, values in (raw.get('backends') or {}).items():
        config.backends[name] = _build_backend(name, dict(values))

    sections = (('embedding', config.embedding), ('retrieval', config.retrieval), ('eval', config.eval))
    for section, target in sections:
        values = raw.get(section) or {}
        _reject_secrets(section, values)
        for key, value in values.items():
            if not hasattr(target, key):
                raise ConfigError(f"[{section}] has unknown key '{key}'")
            setattr(target, key, value)

    logger.info(f"Loaded config from {path}: {len(config.backends)} backend(s)")
    return config


def setup_logging(level: str = 'WARNING', trace_io: bool = False):
    """
    Configure root logging for CLI runs.

    Args:
        level: Logging level name
        trace_io: When set, the gateway logger emits request/response bodies at DEBUG
    """
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.WARNING),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    if trace_io:
        logging.getLogger('llm_gateway').setLevel(logging.DEBUG)
