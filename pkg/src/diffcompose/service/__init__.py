"""HTTP service wrapping the composition pipeline."""

from .app import create_app

__all__ = ["create_app"]
