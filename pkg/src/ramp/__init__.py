"""Point-cloud-conditioned energy-based diffusion motion planning."""

from ._version import __version__

__all__ = ["__version__"]
