"""Power-grid DAE simulation, moving-horizon estimation, and PMU placement."""

__version__ = "0.1.0"
