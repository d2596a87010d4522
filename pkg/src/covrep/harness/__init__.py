from .config import PROTOCOLS, ConfigError, ExperimentConfig
from .protocols import RUNNERS, verify_outputs

__all__ = ["PROTOCOLS", "ConfigError", "ExperimentConfig", "RUNNERS", "verify_outputs"]
