"""Deep action priors for completing skeletal motion with unobserved joints."""

from pathlib import Path

__version__ = "0.1.0"


def presets_dir() -> Path:
    """Directory holding the shipped topology, model and run presets."""
    return Path(__file__).resolve().parent / "presets"
