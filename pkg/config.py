"""
Configuration for the sleep-fusion toolkit.

Environment (.env or shell):
  SFUS_THREADS=4        # caps parallel preprocessing and BLAS threads
  SFUS_LOG_LEVEL=INFO

Run configuration is a JSON file whose top-level sections map onto the
dataclasses of each module (see QUICK_START.md for an example).
"""

import dataclasses
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()

# ============================================
# ENVIRONMENT
# ============================================

SFUS_THREADS = int(os.getenv("SFUS_THREADS", "4"))
SFUS_LOG_LEVEL = os.getenv("SFUS_LOG_LEVEL", "INFO")

CONFIG_SECTIONS = (
    "seed", "preprocess", "sceeg", "ppg", "fusion",
    "train", "fusion_train", "fine_tune", "synth",
)

T = TypeVar("T")


def pin_threads(threads: Optional[int] = None):
    """Cap BLAS/OpenMP threads; only effective before numpy is first imported."""
    threads = threads or SFUS_THREADS
    if threads < 1:
        raise ConfigError(f"SFUS_THREADS must be >= 1, got {threads}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))


def setup_logging(level: Optional[str] = None):
    logging.basicConfig(
        level=getattr(logging, (level or SFUS_LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s %(levelname)-7s %(message)s",
        datefmt="%H:%M:%S",
    )


# ============================================
# JSON RUN CONFIG
# ============================================

def load_json_config(path) -> Dict[str, Any]:
    """Read a run config file; a missing path means all defaults."""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")
    unknown = sorted(set(data) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown config sections: {', '.join(unknown)}")
    return data


def from_dict(cls: Type[T], data: Optional[Dict[str, Any]], section: str = "") -> T:
    """Build a config dataclass from a JSON section, rejecting unknown keys."""
    data = dict(data or {})
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"Unknown keys in '{section or cls.__name__}': {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{section or cls.__name__}' config: {e}")


def config_hash(cfg) -> str:
    """Stable short content hash of a config dataclass or plain dict."""
    payload = dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else cfg
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
