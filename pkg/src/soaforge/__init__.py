"""Bit-packed AoS/SoA layout transformations with truncated floating-point storage."""

__version__ = "0.1.0"

from soaforge._backend import NAME as BACKEND  # noqa: E402
