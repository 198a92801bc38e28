"""Library code shared by the planning stack."""

import json
import logging
import os
import time
from contextlib import contextmanager
from typing import Any, Iterator

import toml
from pydantic import BaseModel

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "MAPPLAN_CONFIG"


def load_settings(path: str | None = None) -> dict[str, Any]:
    """Load a flat settings mapping from a key-value config file.

    The file is `key = value` text with `#` comments, which is read as toml; `.json` files are also accepted.
    When no path is given the `MAPPLAN_CONFIG` environment variable is consulted.

    Args:
        path: path to the config file, or None.

    Returns:
        flat dictionary of settings, empty when no file is configured
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Config file {path} does not exist")

    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if path.endswith(".json"):
        data = json.loads(text)
    else:
        data = toml.loads(text)

    nested = [key for key, value in data.items() if isinstance(value, dict)]
    if nested:
        raise ValueError(f"Config must be flat key = value pairs, found sections {nested}")
    logger.info(f"Loaded {len(data)} settings from {path}")
    return data


def settings_for(model_cls: type[BaseModel], settings: dict[str, Any]) -> dict[str, Any]:
    """Pick the settings a model declares."""
    return {key: value for key, value in settings.items() if key in model_cls.model_fields}


def warn_unused(settings: dict[str, Any], *model_classes: type[BaseModel]) -> list[str]:
    """Log settings no model consumes.

    Args:
        settings: flat settings mapping.
        model_classes: models that read from the mapping.

    Returns:
        sorted list of unused keys
    """
    known = set().union(*(cls.model_fields for cls in model_classes))
    unused = sorted(set(settings) - known)
    if unused:
        logger.warning(f"Ignoring unknown config keys: {', '.join(unused)}")
    return unused


def ensure_dir(*parts: str) -> str:
    """Join path parts and make sure the directory exists."""
    path = os.path.join(*parts)
    os.makedirs(path, exist_ok=True)
    return path


class StageTimer:
    """Accumulate wall-clock seconds per named stage."""

    def __init__(self) -> None:
        self.timings: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Time the enclosed block under `name`, adding to earlier entries of the same name."""
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    @property
    def total(self) -> float:
        """Sum over all stages."""
        return sum(self.timings.values())
