"""Privacy accounting for DP-SGD under Balls-and-Bins and related batch samplers."""

__version__ = "0.1.0"
