"""Desk-scale synthetic benchmark: data, training, evaluation, CLI."""
from .config import BenchConfig, ConfigError

__all__ = ["BenchConfig", "ConfigError"]
