"""Statistical downscaling of gridded daily weather to station scale."""

__version__ = "0.1.0"
