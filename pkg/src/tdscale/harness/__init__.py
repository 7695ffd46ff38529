from .config import ConfigError, validate_config
from .presets import PRESETS
from .runner import run_preset

__all__ = ["ConfigError", "PRESETS", "run_preset", "validate_config"]
