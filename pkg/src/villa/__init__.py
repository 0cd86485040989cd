"""Desk-scale video reasoning segmentation: a small language-conditioned
video instance segmenter trained and evaluated on synthetic moving shapes."""

from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, NumericalAbort, VillaError
from .model import ViLLa

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "ViLLa", "VillaError", "ConfigError", "FormatError", "NumericalAbort"]
