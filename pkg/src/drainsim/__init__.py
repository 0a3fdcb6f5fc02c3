"""Discrete-event model of an integrated CPU/accelerator memory path and of a
covert channel built on memory-controller write drains."""

__version__ = "0.1.0"

from .config import ConfigError, SocConfig, load_config  # noqa: E402
from .simcore import Engine  # noqa: E402

__all__ = ["ConfigError", "Engine", "SocConfig", "load_config", "__version__"]
