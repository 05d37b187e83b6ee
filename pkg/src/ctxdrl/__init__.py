"""Context-aware deep policy-gradient portfolio allocation."""

from .errors import ConfigError, CtxDRLError, DataError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = ["ConfigError", "CtxDRLError", "DataError", "NumericError", "ShapeError", "__version__"]
