"""Relation-aware visual instruction data: grounding tokens, pair collection,
description and dialogue generation, synthetic pairs and evaluation."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def fixture_path(name: str = "") -> Path:
    """Filesystem path of a bundled fixture, e.g. ``fixture_path("reid/build.toml")``."""
    return Path(str(resources.files("relforge.data.fixtures").joinpath(name)))
