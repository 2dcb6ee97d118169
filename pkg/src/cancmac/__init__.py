"""Single-cell WLAN simulator comparing 802.11 DCF, two-slot AF cooperation
(COOP-MAC) and cooperative overlapped analog network coding (CANC-MAC)."""

from .config import ConfigError, ExperimentConfig, build_config
from .engine import Metrics, Simulator, collect, run

__all__ = ["ConfigError", "ExperimentConfig", "build_config", "Metrics",
           "Simulator", "collect", "run"]
__version__ = "0.1.0"
