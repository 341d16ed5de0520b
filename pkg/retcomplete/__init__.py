"""Core package for retcomplete."""

from retcomplete.version import __author__, __description__, __version__

__all__ = ["__version__", "__author__", "__description__"]
