"""CNN lithology classification of grayscale micro-CT slices, in numpy."""

__version__ = "0.1.0"
