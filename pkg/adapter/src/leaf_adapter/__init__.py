"""Reference model-protocol adapter (protocol v1, stdlib only)."""

from .server import AdapterConfig, AdapterError, serve

__version__ = "0.1.0"

__all__ = ["AdapterConfig", "AdapterError", "serve", "__version__"]
