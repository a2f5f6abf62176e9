"""gridbench: specialized vs multi-domain classifier benchmarking on class-by-domain grids."""

__version__ = "0.1.0"
