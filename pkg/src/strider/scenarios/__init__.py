"""Bundled golden scenarios."""

from __future__ import annotations

import json
from importlib import resources

BUNDLED = ("stones_static", "stones_dynamic", "narrow_path")


def path_for(name: str) -> str | None:
    """Absolute path of a bundled scenario, or None if there is no such file."""
    if not name.endswith(".json"):
        name = name + ".json"
    ref = resources.files(__package__) / name
    return str(ref) if ref.is_file() else None


def load(name: str) -> dict:
    path = path_for(name)
    if path is None:
        raise FileNotFoundError(f"no bundled scenario named {name!r}")
    with open(path) as fh:
        return json.load(fh)
