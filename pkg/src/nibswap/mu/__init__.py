"""Bundled transformer programs for the sample app updates."""
from importlib import resources


def source(name: str) -> str:
    """Text of a bundled program, e.g. ``source("fw_timeout")``."""
    return resources.files(__name__).joinpath(f"{name}.xf").read_text()
