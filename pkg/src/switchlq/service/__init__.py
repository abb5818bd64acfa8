"""HTTP service exposing the solver commands."""
from .app import app, create_app

__all__ = ["app", "create_app"]
