"""Metric scene reconstruction from panorama-derived perspective views,
localization of uncalibrated stationary cameras, and ground-plane metrology."""

__version__ = "0.1.0"

from . import errors, geodesy, geometry, groundplane, io, localize, optim, sfm, synth, traffic

__all__ = [
    "errors",
    "geometry",
    "geodesy",
    "optim",
    "sfm",
    "localize",
    "groundplane",
    "traffic",
    "synth",
    "io",
    "__version__",
]
