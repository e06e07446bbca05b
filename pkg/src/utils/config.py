"""
Gradus QR v1.0 - Configuration Utilities
Central configuration for the rewriting-difficulty platform
"""

import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from src.core.exceptions import ConfigError


class SpecialTokens:
    PAD = 0
    START = 1
    END = 2
    SEP = 3
    UNK = 4

    NAMES = ("<pad>", "<s>", "</s>", "|||", "<unk>")


class Config:
    """Application configuration constants"""
    RUN_ROOT_ENV = "GRADUS_RUN_ROOT"
    DEFAULT_RUN_ROOT = "runs"
    RUN_LAYOUT_VERSION = 1

    # Run directory layout
    CONFIG_DIR = "config"
    CHECKPOINT_DIR = "checkpoints"
    SCORES_DIR = "scores"
    LOGS_DIR = "logs"
    STAGES_DIR = "stages"
    REPORT_DIR = "report"
    VOCAB_FILE = "vocab.json"
    MANIFEST_FILE = "bundle.manifest"

    # Study constants
    ADAPTER_LR = 1e-4
    FINETUNE_LR = 1e-5
    DISTILL_GAMMA = 0.5
    BEAM_WIDTH = 4
    LENGTH_PENALTY = 1.0
    LAYER_NORM_EPS = 1e-5
    ADAPTER_INIT_STD = 0.02


def load_environment() -> Dict[str, str]:
    """Load .env (if any) and return the resolved environment settings"""
    load_dotenv()
    return {
        "run_root": os.getenv(Config.RUN_ROOT_ENV, Config.DEFAULT_RUN_ROOT),
    }


def resolve_run_dir(run: str) -> Path:
    """Relative run names live under the configured run root"""
    path = Path(run)
    if path.is_absolute() or path.exists():
        return path
    return Path(load_environment()["run_root"]) / path


def setup_logging(log_dir: Optional[Path] = None, verbose: bool = False, name: str = "gradus") -> logging.Logger:
    """Setup logging configuration"""
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        log_file = log_dir / f"{name}_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )
    return logging.getLogger(name)


def _coerce(value: str) -> Any:
    lowered = value.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if lowered in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value


def parse_flat_config(path) -> Dict[str, Any]:
    """
    Parse a flat ``key = value`` config file

    Args:
        path: Text file; ``#`` starts a comment, blank lines are ignored

    Returns:
        Dictionary of keys to int/float/bool/str values
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}", path=str(path))

    settings: Dict[str, Any] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'", line=line_no)
            key, value = (part.strip() for part in line.split('=', 1))
            if not key:
                raise ConfigError(f"{path}:{line_no}: empty key", line=line_no)
            settings[key] = _coerce(value)
    return settings


def write_flat_config(path, settings: Dict[str, Any]) -> None:
    """Write settings back in the flat format (sorted keys)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for key in sorted(settings):
            f.write(f"{key} = {settings[key]}\n")
